fn main() -> std::process::ExitCode {
    ask_service::cli::main()
}
