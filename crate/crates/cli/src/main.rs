fn main() {
    std::process::exit(voxstream_cli::cli::main_with(std::env::args_os()));
}
