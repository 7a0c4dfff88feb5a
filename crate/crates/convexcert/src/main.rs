use convexcert::cli;

fn main() {
    std::process::exit(cli::run());
}
