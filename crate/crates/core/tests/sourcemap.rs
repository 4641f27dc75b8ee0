//! Adversarial file names never resolve outside the source root.

use std::fs;

use proptest::prelude::*;
use tracelens_core::sourcemap::{fetch, SourceRoot};

fn segment() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "..", ".", "", "src", "main.c", "secret.txt", "link", "outside", "%2e%2e", "..\\..", "a b", "\u{0}", "~",
    ])
    .prop_map(str::to_string)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn resolved_paths_stay_inside_root(
        segs in prop::collection::vec(segment(), 0..8),
        leading_slash in any::<bool>(),
        allow_absolute in any::<bool>(),
        absolute_root in any::<bool>(),
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("root");
        fs::create_dir_all(root.join("src")).unwrap();
        fs::write(root.join("src/main.c"), "int main() {}\n").unwrap();
        fs::write(root.join("main.c"), "x\n").unwrap();
        fs::create_dir_all(tmp.path().join("outside")).unwrap();
        fs::write(tmp.path().join("outside/secret.txt"), "secret\n").unwrap();
        fs::write(tmp.path().join("secret.txt"), "secret\n").unwrap();
        #[cfg(unix)]
        std::os::unix::fs::symlink(tmp.path().join("outside"), root.join("link")).unwrap();

        let sr = SourceRoot::new(&root).unwrap().allow_absolute(allow_absolute);
        let mut name = segs.join("/");
        if absolute_root {
            name = format!("{}/{}", sr.root_path().display(), name);
        } else if leading_slash {
            name.insert(0, '/');
        }
        if let Ok(p) = sr.resolve(&name) {
            prop_assert!(p.starts_with(sr.root_path()), "{} resolved to {}", name, p.display());
            prop_assert!(p.is_file());
            let text = fetch(&p).unwrap();
            prop_assert!(!text.lines.iter().any(|l| l.contains("secret")));
        }
    }
}
