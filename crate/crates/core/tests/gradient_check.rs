mod common;

use common::{gradcheck_config, gradient_check, random_batch};
use humsearch::embedder::HeadPooling;
use humsearch::{ArcFaceConfig, EmbedderParams};

#[test]
fn analytic_gradients_match_central_differences() {
    let acfg = ArcFaceConfig { n_classes: 3, ..ArcFaceConfig::default() };
    for pooling in [HeadPooling::Global, HeadPooling::Time, HeadPooling::Flatten] {
        for batch in 0..5u64 {
            let cfg = gradcheck_config(batch, pooling);
            let params = EmbedderParams::init(&cfg, 3).unwrap();
            let (patches, labels) = random_batch(&cfg, 3, 4, batch);
            let r = gradient_check(&cfg, &acfg, &params, &patches, &labels, 1e-4, 1e-4, 1e-7);
            println!(
                "{pooling:?} batch {batch}: {} coordinates, {} kink crossings, worst rel {:.2e}",
                r.checked, r.kink_crossings, r.worst_rel
            );
            assert!(r.failures.is_empty(), "{pooling:?} batch {batch}:\n{}", r.failures.join("\n"));
        }
    }
}
