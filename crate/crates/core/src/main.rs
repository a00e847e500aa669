fn main() -> std::process::ExitCode {
    newsnav_core::cli::main()
}
