fn main() {
    std::process::exit(lorafuse::cli::dispatch(std::env::args_os()));
}
