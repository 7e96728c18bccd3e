fn main() -> std::process::ExitCode {
    point_rae::cli::run()
}
