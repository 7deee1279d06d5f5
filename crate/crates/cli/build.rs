// Build metadata for `involute --version`.
fn main() {
    let mut features: Vec<String> = std::env::vars()
        .filter_map(|(k, _)| k.strip_prefix("CARGO_FEATURE_").map(|f| f.to_lowercase().replace('_', "-")))
        .collect();
    features.sort();
    let features = if features.is_empty() { "none".to_string() } else { features.join(",") };
    println!("cargo:rustc-env=INVOLUTE_FEATURES={features}");
    println!("cargo:rustc-env=INVOLUTE_PROFILE={}", std::env::var("PROFILE").unwrap_or_default());
    println!("cargo:rustc-env=INVOLUTE_TARGET={}", std::env::var("TARGET").unwrap_or_default());
}
