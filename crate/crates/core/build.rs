fn main() {
    for (from, to) in [("TARGET", "EQUICAPS_TARGET"), ("PROFILE", "EQUICAPS_PROFILE")] {
        let v = std::env::var(from).unwrap_or_else(|_| "unknown".into());
        println!("cargo:rustc-env={to}={v}");
    }
    println!("cargo:rerun-if-changed=build.rs");
}
