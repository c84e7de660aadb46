fn main() {
    std::process::exit(df2m::cli::run(std::env::args_os()));
}
