fn main() -> std::process::ExitCode {
    cryoloop_service::cli::main()
}
