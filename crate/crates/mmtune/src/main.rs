fn main() { mmtune::cli::main(); }
