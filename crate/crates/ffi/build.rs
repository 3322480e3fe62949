fn main() {
    let root = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(format!("{root}/cbindgen.toml")).expect("cbindgen.toml");
    cbindgen::generate_with_config(&root, config)
        .expect("unable to generate bindings")
        .write_to_file(format!("{root}/include/colm.h"));
}
