//! Trains tokenizers on the two-domain sinusoid corpus and reports held-out
//! reconstruction error and code usage.
//!
//!   cargo run --release -p sigprompt-core --example tokenizer_fixture

use std::time::Instant;

use sigprompt_core::dataset::sinusoid_corpus;
use sigprompt_core::vq::{train_tokenizer, TokenizerConfig};

fn main() -> sigprompt_core::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    for ds in sinusoid_corpus(42)? {
        let ds = ds.normalized();
        let (train, test) = ds.instances.split_at(150);
        let train = ds.with_instances(train.to_vec());
        let test = ds.with_instances(test.to_vec());
        let cfg = TokenizerConfig {
            steps,
            seed: 3,
            ..Default::default()
        };
        let start = Instant::now();
        let (model, log) = train_tokenizer(&train, &cfg)?;
        let hist = model.token_usage_histogram(&ds)?;
        let used = hist.iter().filter(|&&c| c > 0).count();
        println!(
            "{}: first recon {:.4} last recon {:.4} held-out mse {:.4} used {}/{} reseeded {} in {:.1?}",
            ds.domain,
            log.steps[0].recon,
            log.steps.last().unwrap().recon,
            model.reconstruction_mse(&test)?,
            used,
            hist.len(),
            log.codes_reseeded,
            start.elapsed()
        );
    }
    Ok(())
}
