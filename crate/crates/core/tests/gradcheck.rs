use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sigprompt_core::lm::{cross_entropy_grad, LmConfig, ToyLm};
use sigprompt_core::nn::Module;
use sigprompt_core::numcheck::{check_module, DEFAULT_STEP};
use sigprompt_core::prompt::VocabSpec;
use sigprompt_core::vq::{vq_loss_masked, PatchBatch, TcnConfig, TokenizerConfig, TokenizerModel};

const TOL: f64 = 1e-6;

fn small_tokenizer() -> (TokenizerModel, PatchBatch) {
    let cfg = TokenizerConfig {
        codebook_size: 6,
        code_dim: 4,
        patch_len: 4,
        tcn: TcnConfig {
            hidden: 5,
            kernel: 3,
            dilations: vec![1, 2],
        },
        ..TokenizerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = TokenizerModel::new("g", 2, &cfg, &mut rng).unwrap();
    // Lengths 14 and 8: the first series gets a padded final patch.
    let a = Array2::from_shape_simple_fn((2, 14), || rng.random_range(-1.0..1.0));
    let b = Array2::from_shape_simple_fn((2, 8), || rng.random_range(-1.0..1.0));
    let batch = PatchBatch::from_series([a.view(), b.view()], 4).unwrap();
    (model, batch)
}

/// The straight-through objective as an ordinary function of the weights:
/// the decoder sees `z_e + (z_q0 - z_e0)` with the shift frozen at the
/// current point, and the commitment term pulls toward the frozen codes.
#[test]
fn tokenizer_gradients_match_straight_through_surrogate() {
    let (mut model, batch) = small_tokenizer();
    let out = model.compute_gradients(&batch).unwrap();
    let z_q0 = model.lookup(&out.codes);
    let shift = &z_q0 - &out.z_e;
    let beta = model.config.beta;
    let surrogate = |m: &TokenizerModel| {
        let z_e = m.encode_continuous(&batch);
        let x_hat = m.decode_quantized(&(&z_e + &shift), &batch.segs);
        let l = vq_loss_masked(
            batch.patches.view(),
            x_hat.view(),
            Some(batch.mask.view()),
            z_e.view(),
            z_q0.view(),
            beta,
        )
        .unwrap();
        l.recon + l.commit
    };
    for group in ["patch_embed", "encoder", "decoder"] {
        let report = check_module(&mut model, surrogate, |n| n.starts_with(group), DEFAULT_STEP);
        assert!(report.checked > 0);
        assert!(report.passes(TOL), "{group}: {report:?}");
    }
}

fn micro_lm() -> ToyLm {
    let words = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
    let vocab = VocabSpec::build(words, &[("x".into(), 4)]).unwrap();
    assert_eq!(vocab.size(), 20);
    let cfg = LmConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        context: 16,
        projector_hidden: vec![8],
        init_std: 0.4,
        seed: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cb = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
    ToyLm::new(cfg, vocab, vec![cb]).unwrap()
}

#[test]
fn lm_gradients_match_finite_differences() {
    let mut m = micro_lm();
    let ids = [1, 6, 9, 4, 16, 18, 17, 5, 7, 12, 2];
    let mask = [false, false, false, false, true, true, true, false, true, true, true];
    let (_, count) = m.accumulate_gradients(&ids, &mask, 1.0).unwrap();
    // accumulate_gradients returns summed-loss gradients; compare to the sum.
    let loss = |model: &ToyLm| model.sequence_loss(&ids, &mask).unwrap() * count as f64;
    for group in [
        "text_embedding",
        "positional",
        "projector",
        "block0.ln",
        "block0.attn",
        "block0.fc",
        "ln_f",
        "head",
    ] {
        let report = check_module(&mut m, loss, |n| n.starts_with(group), DEFAULT_STEP);
        assert!(report.checked > 0, "{group}");
        assert!(report.passes(TOL), "{group}: {report:?}");
    }
    assert_eq!(
        m.num_params(),
        m.params().iter().map(|(_, p)| p.value.len()).sum::<usize>()
    );
}

#[test]
fn projector_gradients_alone() {
    let mut m = micro_lm();
    for (name, p) in m.params_mut() {
        if !name.starts_with("projector") {
            p.value.mapv_inplace(|v| v * 0.5);
        }
    }
    let ids = [16, 19, 17, 18, 16];
    let mask = [false, true, true, true, true];
    m.accumulate_gradients(&ids, &mask, 4.0).unwrap();
    let loss = |model: &ToyLm| model.sequence_loss(&ids, &mask).unwrap();
    let report = check_module(&mut m, loss, |n| n.starts_with("projector"), DEFAULT_STEP);
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn answer_only_mask_zeroes_other_logit_gradients() {
    let m = micro_lm();
    let ids = [1, 6, 9, 16, 17, 7, 8, 2];
    let mask = [false, false, false, false, false, true, true, true];
    let logits = m.forward(&ids[..7]).unwrap();
    let (_, _, g) = cross_entropy_grad(&logits, &ids[1..], &mask[1..], 3.0).unwrap();
    for (row, &on) in g.outer_iter().zip(&mask[1..]) {
        if on {
            assert!(row.iter().any(|&v| v != 0.0));
        } else {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }
}
