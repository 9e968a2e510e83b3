//! Separability oracle for the synthetic generator: across seeds, the mean
//! pixel distance between any two identity templates must exceed the mean
//! per-image jitter distance, otherwise identities would not be learnable at
//! desk scale.

use facehash_core::datapipe::{make_synthetic_dataset, synthetic_template};

#[test]
fn templates_are_separated_beyond_jitter() {
    let identities = 10;
    let images = 6;
    let size = 32;
    for seed in 0..10u64 {
        let templates: Vec<_> = (0..identities)
            .map(|i| synthetic_template(identities, i, size, seed))
            .collect();

        let mut min_inter = f64::INFINITY;
        for i in 0..identities {
            for j in i + 1..identities {
                min_inter = min_inter.min(templates[i].mean_abs_diff(&templates[j]));
            }
        }

        let ds = make_synthetic_dataset(identities, images, size, seed).unwrap();
        let mut max_intra = 0.0f64;
        for sample in ds.samples() {
            let d = sample.image.mean_abs_diff(&templates[sample.label.index()]);
            max_intra = max_intra.max(d);
        }

        assert!(
            min_inter > max_intra,
            "seed {seed}: min inter-template distance {min_inter:.4} must exceed \
             max per-image jitter distance {max_intra:.4}"
        );
    }
}
