#include <stdio.h>
#include <string.h>
#include "vista_align.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__,   \
                    #cond, va_last_error());                          \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(int argc, char **argv) {
    CHECK(argc == 3);
    VaParams *params = NULL;
    CHECK(va_params_new_default(&params) == VA_STATUS_OK);
    CHECK(va_params_set(params, "theta_rp", "6") == VA_STATUS_OK);
    CHECK(va_params_set(params, "no_such_key", "1") == VA_STATUS_INVALID_ARGUMENT);
    CHECK(strstr(va_last_error(), "no_such_key") != NULL);

    VaMap *a = NULL, *b = NULL;
    CHECK(va_map_load(argv[1], &a) == VA_STATUS_OK);
    CHECK(va_map_load(argv[2], &b) == VA_STATUS_OK);
    CHECK(va_map_load("/nonexistent/map.json", &b) == VA_STATUS_IO);
    size_t n = 0;
    CHECK(va_map_len(a, &n) == VA_STATUS_OK && n > 0);

    char *json = NULL;
    CHECK(va_map_to_json(a, &json) == VA_STATUS_OK);
    VaMap *copy = NULL;
    CHECK(va_map_from_json(json, &copy) == VA_STATUS_OK);
    va_string_free(json);
    va_map_free(copy);

    VaHypotheses *hyps = NULL;
    CHECK(va_align(a, b, params, &hyps) == VA_STATUS_OK);
    size_t count = 0;
    CHECK(va_hypotheses_len(hyps, &count) == VA_STATUS_OK && count > 0);
    VaHypothesis top;
    CHECK(va_hypotheses_get(hyps, 0, &top) == VA_STATUS_OK);
    CHECK(va_hypotheses_get(hyps, count, &top) == VA_STATUS_INVALID_ARGUMENT);
    CHECK(va_hypotheses_get(hyps, 0, &top) == VA_STATUS_OK);
    printf("%zu %.6f %.6f %.6f %.6f\n", top.cardinality, top.yaw, top.translation[0], top.translation[1],
           top.translation[2]);

    CHECK(va_consistency_score(0.0, 0.05, 0.1) == 1.0);
    CHECK(va_consistency_score(0.2, 0.05, 0.1) == 0.0);

    va_hypotheses_free(hyps);
    va_map_free(a);
    va_map_free(b);
    va_params_free(params);
    return 0;
}
