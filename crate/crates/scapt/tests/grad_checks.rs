//! Central finite-difference checks of every differentiable op and of the
//! composed model losses against the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scapt::data::{AspectExample, LabeledSentence, Polarity, SentimentLabel, Span};
use scapt::error::Result;
use scapt::finetune::finetune_loss;
use scapt::model::{init_params, EncoderConfig, HeadSet};
use scapt::params::{Binding, ParamSet};
use scapt::pretrain::{joint_pretrain_loss, PretrainConfig};
use scapt::tape::{Tape, Var};
use scapt::tensor::Tensor;
use scapt::vocab::Vocab;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor { shape, data }
}

/// Compares analytic gradients of `f` with central differences over every
/// entry of every parameter.
fn check_gradients<F>(params: &mut ParamSet, f: F, label: &str)
where
    F: Fn(&mut Tape, &Binding) -> Result<Var>,
{
    let eval = |params: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let loss = f(&mut tape, &binding).expect(label);
        tape.value(loss).data[0]
    };
    let analytic = {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let loss = f(&mut tape, &binding).expect(label);
        assert_eq!(tape.value(loss).data.len(), 1, "{label}: loss not scalar");
        tape.backward(loss).unwrap();
        binding.grads(&tape)
    };
    let names: Vec<String> = params.names().cloned().collect();
    let mut worst = 0.0f64;
    for name in &names {
        let len = params.get(name).unwrap().data.len();
        for i in 0..len {
            let orig = params.get(name).unwrap().data[i];
            params.get_mut(name).unwrap().data[i] = orig + H;
            let up = eval(params);
            params.get_mut(name).unwrap().data[i] = orig - H;
            let down = eval(params);
            params.get_mut(name).unwrap().data[i] = orig;
            let fd = (up - down) / (2.0 * H);
            let an = analytic[name].data[i];
            // near-zero gradients (for example the attention key bias, which
            // cancels under the softmax shift invariance) sit below the
            // cancellation noise of the central difference
            if (fd - an).abs() < 1e-6 {
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(
                rel < TOL,
                "{label}: {name}[{i}] analytic {an} vs fd {fd} (rel {rel:.3e})"
            );
            worst = worst.max(rel);
        }
    }
    println!("{label}: worst relative error {worst:.3e}");
}

/// Fixed random projection so the scalar loss is sensitive to every output
/// entry, not just their sum.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = tape.constant(rand_tensor(&mut rng, shape));
    let prod = tape.mul(out, c)?;
    tape.sum(prod)
}

fn single_param(seed: u64, shape: Vec<usize>) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.insert("x", rand_tensor(&mut rng, shape));
    params
}

fn two_params(seed: u64, a: Vec<usize>, b: Vec<usize>) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.insert("a", rand_tensor(&mut rng, a));
    params.insert("b", rand_tensor(&mut rng, b));
    params
}

#[test]
fn grad_add_sub_mul_scale() {
    let mut params = two_params(1, vec![3, 4], vec![3, 4]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let a = binding.var("a")?;
            let b = binding.var("b")?;
            let s = tape.add(a, b)?;
            let d = tape.sub(s, b)?;
            let m = tape.mul(d, a)?;
            let scaled = tape.scale(m, -1.7)?;
            project(tape, scaled, 100)
        },
        "add_sub_mul_scale",
    );
}

#[test]
fn grad_matmul_transpose() {
    let mut params = two_params(2, vec![3, 4], vec![3, 5]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let a = binding.var("a")?;
            let b = binding.var("b")?;
            let at = tape.transpose(a)?;
            let prod = tape.matmul(at, b)?;
            project(tape, prod, 101)
        },
        "matmul_transpose",
    );
}

#[test]
fn grad_add_bias() {
    let mut params = two_params(3, vec![4, 3], vec![3]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let a = binding.var("a")?;
            let b = binding.var("b")?;
            let out = tape.add_bias(a, b)?;
            project(tape, out, 102)
        },
        "add_bias",
    );
}

#[test]
fn grad_slice_and_concat_cols() {
    let mut params = two_params(4, vec![3, 6], vec![3, 2]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let a = binding.var("a")?;
            let b = binding.var("b")?;
            let left = tape.slice_cols(a, 0, 3)?;
            let right = tape.slice_cols(a, 3, 6)?;
            let joined = tape.concat_cols(&[left, b, right])?;
            project(tape, joined, 103)
        },
        "slice_concat_cols",
    );
}

#[test]
fn grad_concat_rows() {
    let mut params = two_params(5, vec![2, 4], vec![3, 4]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let a = binding.var("a")?;
            let b = binding.var("b")?;
            let joined = tape.concat_rows(&[a, b])?;
            project(tape, joined, 104)
        },
        "concat_rows",
    );
}

#[test]
fn grad_gather_rows_with_duplicates() {
    let mut params = single_param(6, vec![5, 3]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            // row 2 twice: its gradient must accumulate
            let gathered = tape.gather_rows(x, &[2, 0, 2, 4])?;
            project(tape, gathered, 105)
        },
        "gather_rows",
    );
}

#[test]
fn grad_mean_rows_and_reductions() {
    let mut params = single_param(7, vec![4, 3]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            let m = tape.mean_rows(x)?;
            project(tape, m, 106)
        },
        "mean_rows",
    );
    let mut params = single_param(8, vec![3, 4]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            let sq = tape.mul(x, x)?;
            tape.mean(sq)
        },
        "mean_of_square",
    );
    let mut params = single_param(9, vec![2, 5]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            let c = tape.mul(x, x)?;
            let s = tape.sum(c)?;
            // sum already scalar; route through scale for good measure
            tape.scale(s, 0.5)
        },
        "sum",
    );
}

#[test]
fn grad_softmax_rows() {
    let mut params = single_param(10, vec![3, 5]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            let p = tape.softmax_rows(x)?;
            project(tape, p, 107)
        },
        "softmax_rows",
    );
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::new();
    params.insert("x", rand_tensor(&mut rng, vec![3, 6]));
    params.insert("g", rand_tensor(&mut rng, vec![6]));
    params.insert("b", rand_tensor(&mut rng, vec![6]));
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            let g = binding.var("g")?;
            let b = binding.var("b")?;
            let out = tape.layer_norm(x, g, b, 1e-5)?;
            project(tape, out, 108)
        },
        "layer_norm",
    );
}

#[test]
fn grad_relu_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = ParamSet::new();
    // keep every entry at least 10·H from zero so the finite difference
    // never straddles the kink
    let data: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    params.insert("x", Tensor::new(vec![3, 4], data).unwrap());
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            let r = tape.relu(x)?;
            project(tape, r, 109)
        },
        "relu",
    );
}

#[test]
fn grad_normalize_rows() {
    let mut params = single_param(13, vec![3, 4]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            let n = tape.normalize_rows(x)?;
            project(tape, n, 110)
        },
        "normalize_rows",
    );
}

#[test]
fn grad_cross_entropy() {
    let mut params = single_param(14, vec![4, 6]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let x = binding.var("x")?;
            tape.cross_entropy(x, &[1, 0, 5, 3])
        },
        "cross_entropy",
    );
}

#[test]
fn grad_sup_contrastive() {
    // similarity matrix built from representations so the asymmetric use of
    // rows in the loss is exercised through a real matmul
    let mut params = single_param(15, vec![5, 3]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let reps = binding.var("x")?;
            let rt = tape.transpose(reps)?;
            let sim = tape.matmul(reps, rt)?;
            tape.sup_contrastive(sim, &[0, 1, 0, 1, 0], 0.07)
        },
        "sup_contrastive",
    );
}

#[test]
fn grad_sup_contrastive_with_skipped_anchor() {
    // label 2 has no positive partner; that anchor contributes nothing but
    // still appears in other anchors' denominators
    let mut params = single_param(16, vec![4, 3]);
    check_gradients(
        &mut params,
        |tape, binding| {
            let reps = binding.var("x")?;
            let rt = tape.transpose(reps)?;
            let sim = tape.matmul(reps, rt)?;
            tape.sup_contrastive(sim, &[0, 0, 1, 0], 1.0)
        },
        "sup_contrastive_skip",
    );
}

fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_len: 16,
        dropout_rate: 0.0,
    }
}

fn toy_batch() -> (Vec<LabeledSentence>, Vocab) {
    let batch: Vec<LabeledSentence> = (0..4)
        .map(|i| LabeledSentence {
            tokens: vec![
                "the".into(),
                format!("word{i}"),
                "food".into(),
                "arrived".into(),
                "today".into(),
            ],
            label: if i % 2 == 0 {
                SentimentLabel::Positive
            } else {
                SentimentLabel::Negative
            },
            aspect_spans: vec![Span { from: 2, to: 3 }],
        })
        .collect();
    let vocab = Vocab::build(batch.iter().map(|s| s.tokens.as_slice()), 1);
    (batch, vocab)
}

#[test]
fn grad_joint_pretrain_loss_full_model() {
    let config = toy_encoder();
    let pre = PretrainConfig::default();
    let (batch, vocab) = toy_batch();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut params = init_params(
        &config,
        vocab.len(),
        HeadSet {
            pretrain: true,
            classifier: false,
        },
        &mut rng,
    )
    .unwrap();
    check_gradients(
        &mut params,
        |tape, binding| {
            // identical masking on every evaluation
            let mut mask_rng = ChaCha8Rng::seed_from_u64(77);
            let joint = joint_pretrain_loss(
                tape, binding, &config, &pre, &vocab, &batch, &mut mask_rng, 0.0,
            )?;
            Ok(joint.total)
        },
        "joint_pretrain_loss",
    );
}

#[test]
fn grad_contrastive_only_through_encoder() {
    let config = toy_encoder();
    let pre = PretrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..PretrainConfig::default()
    };
    let (batch, vocab) = toy_batch();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = init_params(
        &config,
        vocab.len(),
        HeadSet {
            pretrain: true,
            classifier: false,
        },
        &mut rng,
    )
    .unwrap();
    check_gradients(
        &mut params,
        |tape, binding| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(78);
            let joint = joint_pretrain_loss(
                tape, binding, &config, &pre, &vocab, &batch, &mut mask_rng, 0.0,
            )?;
            Ok(joint.contrastive)
        },
        "contrastive_through_encoder",
    );
}

#[test]
fn grad_finetune_loss_full_model() {
    let config = toy_encoder();
    let examples: Vec<AspectExample> = [
        Polarity::Positive,
        Polarity::Negative,
        Polarity::Neutral,
    ]
    .iter()
    .enumerate()
    .map(|(i, &polarity)| AspectExample {
        tokens: vec![
            "the".into(),
            "service".into(),
            format!("w{i}"),
            "here".into(),
        ],
        aspect_span: Span { from: 1, to: 2 },
        polarity,
        opinion_spans: vec![],
    })
    .collect();
    let vocab = Vocab::build(examples.iter().map(|e| e.tokens.as_slice()), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut params = init_params(
        &config,
        vocab.len(),
        HeadSet {
            pretrain: false,
            classifier: true,
        },
        &mut rng,
    )
    .unwrap();
    check_gradients(
        &mut params,
        |tape, binding| finetune_loss(tape, binding, &config, &vocab, &examples, None, None),
        "finetune_loss",
    );
}
