fn main() -> std::process::ExitCode {
    landmark_core::cli::main()
}
