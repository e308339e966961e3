fn main() -> std::process::ExitCode {
    lrp_core::cli::main()
}
