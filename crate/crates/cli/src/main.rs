fn main() {
    std::process::exit(concept_embed_cli::run_from_args(std::env::args_os()));
}
