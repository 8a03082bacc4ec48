fn main() {
    std::process::exit(mine_dispatch::cli::run_cli());
}
