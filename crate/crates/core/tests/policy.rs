use genloop::policy::*;
use genloop::world::vocab::EOS;
use genloop::world::*;
use neuralcore::Graph;

fn sample_triplet(seed: u64) -> VqaTriplet {
    let split = make_split(&SplitConfig { train: 4, val: 1, test: 1, ..SplitConfig::default() }, seed).unwrap();
    split.train[0].clone()
}

fn tiny() -> PolicyConfig {
    PolicyConfig { d_embed: 8, d_model: 8, heads: 2, layers: 2, d_ff: 12, ..PolicyConfig::vqa() }
}

#[test]
fn decoder_matches_taped_forward_bitwise() {
    let net = PolicyNet::new(PolicyConfig::vqa(), 3).unwrap();
    let t = sample_triplet(1);
    let ctx = Context::of(&t).unwrap();
    let prefix = &t.answer[..t.answer.len() - 1];
    let taped = forward_logits(&net, &ctx, prefix).unwrap();
    let mut dec = Decoder::new(&net, &ctx).unwrap();
    let v = net.cfg.vocab;
    for j in 0..=prefix.len() {
        assert_eq!(&taped.data()[j * v..(j + 1) * v], dec.next_logits().as_slice(), "position {j}");
        if j < prefix.len() {
            dec.feed(prefix[j]).unwrap();
        }
    }
}

#[test]
fn zero_head_gives_uniform_distribution() {
    let mut net = PolicyNet::new(tiny(), 1).unwrap();
    for name in ["head", "head_b"] {
        net.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|w| *w = 0.0);
    }
    let t = sample_triplet(2);
    let ctx = Context::of(&t).unwrap();
    let logits = forward_logits(&net, &ctx, &t.answer[..3]).unwrap();
    assert!(logits.data().iter().all(|&x| x == 0.0));
    let l = t.answer.len();
    let lp = sequence_logprob(&net, &ctx, &t.answer).unwrap();
    let expected = -(l as f64) * (net.cfg.vocab as f64).ln();
    assert!((lp - expected).abs() < 1e-4 * expected.abs(), "{lp} vs {expected}");
}

#[test]
fn answer_positions_are_causal() {
    let net = PolicyNet::new(tiny(), 5).unwrap();
    let t = sample_triplet(3);
    let ctx = Context::of(&t).unwrap();
    let prefix: Vec<Token> = t.answer[..t.answer.len() - 1].to_vec();
    let base = forward_logits(&net, &ctx, &prefix).unwrap();
    let v = net.cfg.vocab;
    for k in 0..prefix.len() {
        let mut changed = prefix.clone();
        changed[k] = tok("fracture");
        let out = forward_logits(&net, &ctx, &changed).unwrap();
        for pos in 0..=prefix.len() {
            let same = base.data()[pos * v..(pos + 1) * v] == out.data()[pos * v..(pos + 1) * v];
            // logits row `pos` predicts answer[pos] and has seen answer[..pos]
            assert_eq!(same, pos <= k, "perturb {k}, row {pos}");
        }
    }
}

#[test]
fn softmax_rows_normalize() {
    let net = PolicyNet::new(PolicyConfig::vqa(), 9).unwrap();
    let t = sample_triplet(4);
    let dec = Decoder::new(&net, &Context::of(&t).unwrap()).unwrap();
    let s: f64 = dec.next_log_probs().iter().map(|&l| (l as f64).exp()).sum();
    assert!((s - 1.0).abs() < 1e-6);
}

/// Straightforward f64 re-implementation of the forward pass with explicit loops.
fn reference_logits(net: &PolicyNet, ctx: &Context, answer_prefix: &[Token]) -> Vec<Vec<f64>> {
    let c = &net.cfg;
    let p = |n: &str| net.params.get(n).unwrap().to_f64_vec();
    let (d, e, v) = (c.d_model, c.d_embed, c.vocab);
    let mv = |x: &[f64], w: &[f64], rows: usize, cols: usize| -> Vec<f64> {
        (0..cols).map(|j| (0..rows).map(|i| x[i] * w[i * cols + j]).sum()).collect()
    };
    let ln = |x: &[f64]| -> Vec<f64> {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
        x.iter().map(|a| (a - m) / (var + 1e-5).sqrt()).collect()
    };
    let toks: Vec<Token> = ctx.tokens.iter().chain(answer_prefix).copied().collect();
    let (tokw, w_in, w_img, pos) = (p("tok"), p("w_in"), p("w_img"), p("pos"));
    let mut xs: Vec<Vec<f64>> = toks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut x = mv(&tokw[t.index() * e..(t.index() + 1) * e], &w_in, e, d);
            if let Some(Some(s)) = ctx.slots.get(i) {
                let sf: Vec<f64> = s.iter().map(|&a| a as f64).collect();
                let add = mv(&sf, &w_img, SLOT_DIM, d);
                x.iter_mut().zip(add).for_each(|(a, b)| *a += b);
            }
            x.iter_mut().zip(&pos[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
            x
        })
        .collect();
    let dh = d / c.heads;
    for l in 0..c.layers {
        let w = |n: &str| p(&format!("l{l}.{n}"));
        let (wq, wk, wv, wo, w1, b1, w2, b2) = (w("wq"), w("wk"), w("wv"), w("wo"), w("w1"), w("b1"), w("w2"), w("b2"));
        let a: Vec<Vec<f64>> = xs.iter().map(|x| ln(x)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| mv(r, &wq, d, d)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| mv(r, &wk, d, d)).collect();
        let vv: Vec<Vec<f64>> = a.iter().map(|r| mv(r, &wv, d, d)).collect();
        for i in 0..xs.len() {
            let mut att = vec![0.0; d];
            for h in 0..c.heads {
                let r = h * dh..(h + 1) * dh;
                let sc: Vec<f64> = (0..=i)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = sc.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..=i {
                    let pj = (sc[j] - mx).exp() / z;
                    for (o, val) in att[r.clone()].iter_mut().zip(&vv[j][r.clone()]) {
                        *o += pj * val;
                    }
                }
            }
            let o = mv(&att, &wo, d, d);
            xs[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
            let a2 = ln(&xs[i]);
            let h: Vec<f64> = mv(&a2, &w1, d, c.d_ff).iter().zip(&b1).map(|(a, b)| (a + b).tanh()).collect();
            let out: Vec<f64> = mv(&h, &w2, c.d_ff, d).iter().zip(&b2).map(|(a, b)| a + b).collect();
            xs[i].iter_mut().zip(out).for_each(|(a, b)| *a += b);
        }
    }
    let (head, head_b) = (p("head"), p("head_b"));
    xs[ctx.tokens.len() - 1..]
        .iter()
        .map(|x| mv(&ln(x), &head, d, v).iter().zip(&head_b).map(|(a, b)| a + b).collect())
        .collect()
}

#[test]
fn logits_match_explicit_loop_reference() {
    let net = PolicyNet::new(PolicyConfig::vqa(), 7).unwrap();
    let t = sample_triplet(7);
    let ctx = Context::of(&t).unwrap();
    let prefix = &t.answer[..t.answer.len() - 1];
    let got = forward_logits(&net, &ctx, prefix).unwrap();
    let want = reference_logits(&net, &ctx, prefix);
    let v = net.cfg.vocab;
    for (j, row) in want.iter().enumerate() {
        for (i, &w) in row.iter().enumerate() {
            let g = got.data()[j * v + i] as f64;
            assert!((g - w).abs() < 1e-3 * (1.0 + w.abs()), "row {j} col {i}: {g} vs {w}");
        }
    }
}

#[test]
fn decoding_determinism() {
    let net = PolicyNet::new(tiny(), 11).unwrap();
    let ctx = Context::of(&sample_triplet(5)).unwrap();
    let g0 = sample_answer(&net, &ctx, Decode::Greedy, 0).unwrap();
    for s in 1..5 {
        assert_eq!(sample_answer(&net, &ctx, Decode::Greedy, s).unwrap(), g0);
    }
    let mode = Decode::Sample { temperature: 1.0 };
    assert_eq!(sample_answer(&net, &ctx, mode, 42).unwrap(), sample_answer(&net, &ctx, mode, 42).unwrap());
    assert!(sample_answer(&net, &ctx, Decode::Sample { temperature: 0.0 }, 1).is_err());
}

#[test]
fn recorded_logprobs_sum_to_sequence_logprob() {
    let net = PolicyNet::new(tiny(), 12).unwrap();
    let ctx = Context::of(&sample_triplet(6)).unwrap();
    for s in 0..10 {
        let c = sample_answer(&net, &ctx, Decode::Sample { temperature: 1.0 }, s).unwrap();
        assert!(c.logprobs.iter().all(|&l| l <= 0.0));
        assert!(c.tokens.len() <= net.cfg.max_answer);
        assert_eq!(c.terminated, c.tokens.last() == Some(&EOS));
        let lp = sequence_logprob(&net, &ctx, &c.tokens).unwrap();
        assert!((lp - c.logprob()).abs() < 1e-9, "{lp} vs {}", c.logprob());
    }
}

#[test]
fn first_token_frequencies_match_tempered_softmax() {
    let cfg = PolicyConfig { max_answer: 1, ..tiny() };
    let mut net = PolicyNet::new(cfg, 13).unwrap();
    net.params.get_mut("head").unwrap().data_mut().iter_mut().for_each(|w| *w *= 20.0);
    let ctx = Context::of(&sample_triplet(8)).unwrap();
    let temperature = 1.5;
    let lp = Decoder::new(&net, &ctx).unwrap().next_log_probs();
    let w: Vec<f64> = lp.iter().map(|&l| (l as f64 / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let n = 10_000;
    let mut counts = vec![0usize; lp.len()];
    for s in 0..n {
        counts[sample_answer(&net, &ctx, Decode::Sample { temperature }, s).unwrap().tokens[0].index()] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let p = w[i] / z;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd + 1.0, "token {i}: {c} vs {}", n as f64 * p);
    }
}

#[test]
fn toy_vocabulary_probabilities_sum_to_one() {
    let cfg = PolicyConfig { vocab: 3, eos: 2, prefix_len: 1, max_answer: 3, ..tiny() };
    let net = PolicyNet::new(cfg, 21).unwrap();
    let ctx = Context { tokens: vec![Token(0)], slots: vec![None] };
    let mut total = 0.0;
    let mut stack: Vec<Vec<Token>> = vec![vec![]];
    while let Some(prefix) = stack.pop() {
        for t in 0..3u16 {
            let mut seq = prefix.clone();
            seq.push(Token(t));
            if t == 2 || seq.len() == 3 {
                total += sequence_logprob(&net, &ctx, &seq).unwrap().exp();
            } else {
                stack.push(seq);
            }
        }
    }
    assert!((total - 1.0).abs() < 1e-5, "{total}");
}

#[test]
fn overflow_is_a_data_error() {
    let net = PolicyNet::new(tiny(), 1).unwrap();
    let ctx = Context::of(&sample_triplet(9)).unwrap();
    let long = vec![tok("round"); 30];
    assert!(matches!(sequence_logprob(&net, &ctx, &long), Err(genloop::GenError::Data(_))));
}

#[test]
fn nll_loss_gradients_match_finite_differences() {
    let cfg = PolicyConfig { d_embed: 4, d_model: 4, heads: 2, layers: 1, d_ff: 6, ..PolicyConfig::vqa() };
    for seed in 0..3 {
        let net = PolicyNet::new(cfg.clone(), seed).unwrap();
        let params = net.params.cast::<f64>();
        let ts = [sample_triplet(seed), sample_triplet(seed + 50)];
        let ctxs: Vec<Context> = ts.iter().map(|t| Context::of(t).unwrap()).collect();
        let report = neuralcore::finite_diff_check(
            &params,
            |p, g: &mut Graph<f64>| {
                let batch: Vec<SeqExample> =
                    ts.iter().zip(&ctxs).map(|(t, c)| SeqExample { ctx: c, answer: &t.answer }).collect();
                nll_loss(g, p, &cfg, &batch).unwrap()
            },
            1e-3,
        );
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let net = PolicyNet::new(tiny(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("policy.ckpt");
    net.save(&p).unwrap();
    assert_eq!(PolicyNet::load(&p).unwrap(), net);
}

#[test]
fn zero_heads_is_a_config_error() {
    let cfg = PolicyConfig { heads: 0, ..PolicyConfig::vqa() };
    assert!(matches!(cfg.validate(), Err(genloop::GenError::Config(_))));
}
