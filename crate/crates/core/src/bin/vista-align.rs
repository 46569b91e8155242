fn main() -> std::process::ExitCode {
    vista_align::cli::main()
}
