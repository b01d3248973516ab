use std::path::PathBuf;

fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let out = PathBuf::from(&crate_dir).join("include").join("tstream.h");

    let mut config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("TSTREAM_H".to_string()),
        cpp_compat: true,
        documentation: true,
        header: Some("/* C interface to the tstream engine. Generated from src/lib.rs; do not edit. */".to_string()),
        ..Default::default()
    };
    config.enumeration.rename_variants = cbindgen::RenameRule::QualifiedScreamingSnakeCase;

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("generating the C header")
        .write_to_file(&out);

    println!("cargo:rerun-if-changed=src/lib.rs");
}
