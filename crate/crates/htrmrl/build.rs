use std::process::Command;

fn main() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let describe = Command::new("git")
        .args(["describe", "--always", "--dirty", "--abbrev=7"])
        .current_dir(dir)
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into());
    println!("cargo:rustc-env=HTRMRL_GIT_DESCRIBE={describe}");
    let git = std::path::Path::new(dir).join("../../.git");
    for f in ["HEAD", "index"] {
        println!("cargo:rerun-if-changed={}", git.join(f).display());
    }
}
