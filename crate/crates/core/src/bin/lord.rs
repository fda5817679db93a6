fn main() -> std::process::ExitCode {
    lord::cli::main()
}
