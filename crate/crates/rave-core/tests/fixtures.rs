//! Guards the committed training fixture against drift and regenerates it.

mod common;

use common::{fixture_path, load_fixture, synth_fixture};

/// The committed PNG must decode to exactly the synthesized image on the
/// 8-bit grid. Run `regenerate_fixture` after changing the synthesizer.
#[test]
fn committed_fixture_matches_synthesizer() {
    let committed = load_fixture();
    let synth = synth_fixture();
    assert_eq!((committed.width(), committed.height()), (synth.width(), synth.height()));
    for y in 0..synth.height() {
        for x in 0..synth.width() {
            for c in 0..3 {
                let expect = (synth.get(x, y)[c] * 255.0).round() / 255.0;
                let got = committed.get(x, y)[c];
                assert!(
                    (got - expect).abs() < 1e-12,
                    "fixture drifted at ({x},{y}) channel {c}: {got} vs {expect}"
                );
            }
        }
    }
}

#[test]
#[ignore = "writes tests/data/fixture.png"]
fn regenerate_fixture() {
    let path = fixture_path();
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    rave_core::save_png(&synth_fixture(), &path).unwrap();
    println!("wrote {}", path.display());
}
