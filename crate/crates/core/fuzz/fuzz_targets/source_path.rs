#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use tracelens_core::sourcemap::SourceRoot;

fn root() -> &'static SourceRoot {
    static ROOT: OnceLock<SourceRoot> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = std::env::temp_dir().join("tracelens-fuzz-src/tree");
        std::fs::create_dir_all(dir.join("sub")).unwrap();
        std::fs::write(dir.join("sub/work.c"), "int main(void) { return 0; }\n").unwrap();
        SourceRoot::new(&dir).unwrap().strip_prefix(Some("/build".into()))
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(file) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(path) = root().resolve(file) {
        assert!(path.starts_with(root().root_path()), "{file:?} resolved outside the root");
    }
});
