fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(format!("{crate_dir}/include/emint.h"));
        }
        Err(err) => {
            // header generation is best-effort; the committed header stays
            println!("cargo:warning=cbindgen failed: {err}");
        }
    }
}
