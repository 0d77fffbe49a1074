use coolant::contrastive::build_pair_dataset;
use coolant::data::{generate_synthetic, split, FeatureRecord, Label, SplitRatios, SyntheticSpec};
use coolant::model::{Architecture, Dense, Params, Perceptron};
use coolant::numerics::Matrix;
use coolant::training::{compute_dataset_posteriors, joint_loss_value, Ablation, Batch, LossBreakdown, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Vector = Vec<f64>;

fn dense(x: &[f64], layer: &Dense<Matrix>) -> Vector {
    let (w, b) = (&layer.weight, &layer.bias);
    (0..w.cols())
        .map(|o| b[(0, o)] + (0..w.rows()).map(|i| x[i] * w[(i, o)]).sum::<f64>())
        .collect()
}

fn mlp(x: &[f64], p: &Perceptron<Matrix>) -> Vector {
    let h: Vector = dense(x, &p.hidden).into_iter().map(|v| v.max(0.0)).collect();
    dense(&h, &p.output)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_softmax(x: &[f64]) -> Vector {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - z).collect()
}

fn unit(x: &[f64]) -> Vector {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

struct Gaussian {
    mu: Vector,
    var: Vector,
}

fn kl(p: &Gaussian, q: &Gaussian) -> f64 {
    (0..p.mu.len())
        .map(|k| 0.5 * (q.var[k] / p.var[k]).ln() + (p.var[k] + (p.mu[k] - q.mu[k]).powi(2)) / (2.0 * q.var[k]) - 0.5)
        .sum()
}

fn posterior(m: &[f64], tower: &coolant::model::Tower<Matrix>) -> Gaussian {
    Gaussian {
        mu: dense(m, &tower.mean),
        var: dense(m, &tower.logvar).into_iter().map(f64::exp).collect(),
    }
}

fn mixture(ps: &[Gaussian]) -> Gaussian {
    let n = ps.len() as f64;
    let z = ps[0].mu.len();
    let mu: Vector = (0..z).map(|k| ps.iter().map(|p| p.mu[k]).sum::<f64>() / n).collect();
    let var = (0..z)
        .map(|k| (ps.iter().map(|p| p.var[k] + p.mu[k] * p.mu[k]).sum::<f64>() / n - mu[k] * mu[k]).max(1e-8))
        .collect();
    Gaussian { mu, var }
}

fn aligned(params: &Params, img: &[f64], txt: &[f64]) -> (Vector, Vector, Vector, Vector) {
    let e_v = mlp(img, &params.image.encoder);
    let e_t = mlp(txt, &params.text.encoder);
    let m_v = mlp(&e_v, &params.image.shared);
    let m_t = mlp(&e_t, &params.text.shared);
    (e_v, e_t, m_v, m_t)
}

fn fused(params: &Params, m_v: &[f64], m_t: &[f64], ab: Ablation) -> Vector {
    if ab.no_cmf {
        return dense(&[m_v, m_t].concat(), &params.concat);
    }
    let l = m_v.len();
    let scale = (l as f64).sqrt();
    let attend = |a: &[f64], b: &[f64]| -> Vector {
        (0..l)
            .map(|i| {
                let row: Vector = (0..l).map(|j| a[i] * b[j] / scale).collect();
                let w: Vector = log_softmax(&row).into_iter().map(f64::exp).collect();
                dot(&w, a)
            })
            .collect()
    };
    let c_v = attend(m_v, m_t);
    let c_t = attend(m_t, m_v);
    let flat: Vector = c_v.iter().flat_map(|a| c_t.iter().map(move |b| a * b)).collect();
    dense(&flat, &params.fusion)
}

fn similarity_logs(a: &[Vector], b: &[Vector], tau: f64) -> (Vec<Vector>, Vec<Vector>) {
    let n = a.len();
    let s: Vec<Vector> = (0..n).map(|i| (0..n).map(|j| dot(&unit(&a[i]), &unit(&b[j])) / tau).collect()).collect();
    let floored = |r: &[f64]| -> Vector { log_softmax(r).into_iter().map(|v| v.max(1e-12f64.ln())).collect() };
    let v2t = s.iter().map(|r| floored(r)).collect();
    let t2v = (0..n).map(|j| floored(&(0..n).map(|i| s[i][j]).collect::<Vector>())).collect();
    (v2t, t2v)
}

/// Joint objective recomputed sample by sample.
fn straight_line(
    params: &Params,
    config: &TrainConfig,
    records: &[FeatureRecord],
    pairs: &[(Vector, Vector, bool)],
    dataset: &[FeatureRecord],
) -> LossBreakdown {
    let ab = config.ablation;
    let n = records.len() as f64;
    let mut out = LossBreakdown::default();
    let tau = params.log_tau[(0, 0)].clamp(0.01f64.ln(), 0.0).exp();

    let reps: Vec<_> = records.iter().map(|r| aligned(params, &r.img, &r.txt)).collect();
    let mut gates = Vec::new();
    for (r, (_, _, m_v, m_t)) in records.iter().zip(&reps) {
        let m_f = fused(params, m_v, m_t, ab);
        let a = if ab.no_att {
            vec![1.0; 3]
        } else {
            let s = [mean(m_v), mean(m_t), mean(&m_f)];
            mlp(&s, &params.gate).into_iter().map(sigmoid).collect()
        };
        let features: Vector = [m_v, m_t, &m_f].iter().zip(&a).flat_map(|(m, g)| m.iter().map(move |x| g * x)).collect();
        out.l_cls -= log_softmax(&mlp(&features, &params.classifier))[r.label.index()] / n;
        gates.push(a);
    }

    if ab.uses_itm() {
        for (img, txt, matched) in pairs {
            let (_, _, m_v, m_t) = aligned(params, img, txt);
            let cos = dot(&unit(&m_v), &unit(&m_t));
            let term = if *matched { 1.0 - cos } else { (cos - config.itm_margin).max(0.0) };
            out.l_itm += term / pairs.len() as f64;
        }
    }

    if ab.uses_itc() {
        let e_v: Vec<Vector> = reps.iter().map(|r| r.0.clone()).collect();
        let e_t: Vec<Vector> = reps.iter().map(|r| r.1.clone()).collect();
        let (lv, lt) = similarity_logs(&e_v, &e_t, tau);
        let k = records.len();
        out.l_itc = -(0..k).map(|i| lv[i][i] + lt[i][i]).sum::<f64>() / (2.0 * n);
        if ab.uses_sem() {
            let m_v: Vec<Vector> = reps.iter().map(|r| r.2.clone()).collect();
            let m_t: Vec<Vector> = reps.iter().map(|r| r.3.clone()).collect();
            let (qv, qt) = similarity_logs(&m_v, &m_t, tau);
            let mut total = 0.0;
            for i in 0..k {
                for j in 0..k {
                    total += qv[i][j].exp() * lv[i][j] + qt[i][j].exp() * lt[i][j];
                }
            }
            out.l_sem = -total / (2.0 * n);
        }
    }

    if ab.uses_ag() {
        let mut q_v = Vec::new();
        let mut q_t = Vec::new();
        for r in dataset {
            let (_, _, m_v, m_t) = aligned(params, &r.img, &r.txt);
            q_v.push(posterior(&m_v, &params.image));
            q_t.push(posterior(&m_t, &params.text));
        }
        let (big_v, big_t) = (mixture(&q_v), mixture(&q_t));
        for ((_, _, m_v, m_t), a) in reps.iter().zip(&gates) {
            let (p_v, p_t) = (posterior(m_v, &params.image), posterior(m_t, &params.text));
            let g = sigmoid(
                0.5 * (kl(&p_v, &p_t) / kl(&big_v, &big_t).max(1e-6) + kl(&p_t, &p_v) / kl(&big_t, &big_v).max(1e-6)),
            );
            let target = [(1.0 - g) / (2.0 - g), (1.0 - g) / (2.0 - g), g / (2.0 - g)];
            let s: f64 = a.iter().sum();
            out.l_ag += a.iter().zip(&target).map(|(x, t)| (x / s) * ((x / s) / t).ln()).sum::<f64>() / n;
        }
    }
    out.total = out.l_itm + out.l_itc + config.lambda_sem * out.l_sem + out.l_cls + config.gamma_ag * out.l_ag;
    out
}

fn oracle_setup(log_tau: f64) -> (Params, Vec<FeatureRecord>, TrainConfig) {
    let arch = Architecture {
        d_in: 5,
        hidden: 4,
        embed: 4,
        shared_hidden: 4,
        aligned: 3,
        latent: 2,
        classifier_hidden: 4,
    };
    let mut params = Params::init(&arch, 11, 0.07);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    params.visit_mut(|_, m| {
        for x in m.as_mut_slice() {
            *x += rng.random_range(-0.3..0.3);
        }
    });
    params.log_tau[(0, 0)] = log_tau;
    let records = generate_synthetic(&SyntheticSpec {
        n_records: 6,
        d_in: 5,
        seed: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        arch,
        ..TrainConfig::default()
    };
    (params, records, config)
}

#[test]
fn joint_loss_matches_straight_line_recomputation() {
    for log_tau in [0.2f64.ln(), 0.001f64.ln()] {
        let (params, records, base) = oracle_setup(log_tau);
        let pairs = build_pair_dataset(&records, 2, 9).unwrap();
        let batch = Batch::new(&records.iter().collect::<Vec<_>>(), &pairs.iter().collect::<Vec<_>>()).unwrap();
        let plain: Vec<_> = pairs.iter().map(|p| (p.img.clone(), p.txt.clone(), p.matched)).collect();
        for ablation in Ablation::all_combinations() {
            let config = TrainConfig { ablation, ..base.clone() };
            let dataset = compute_dataset_posteriors(&params, &config, &records).unwrap();
            let (got, _) = joint_loss_value(&batch, &params, &config, &dataset, None).unwrap();
            let want = straight_line(&params, &config, &records, &plain, &records);
            for (name, a, b) in [
                ("itm", got.l_itm, want.l_itm),
                ("itc", got.l_itc, want.l_itc),
                ("sem", got.l_sem, want.l_sem),
                ("cls", got.l_cls, want.l_cls),
                ("ag", got.l_ag, want.l_ag),
                ("total", got.total, want.total),
            ] {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{ablation:?} {name}: {a} vs {b}");
            }
        }
    }
}

fn logistic_accuracy(train: &[(Vector, f64)], test: &[(Vector, f64)]) -> f64 {
    let d = train[0].0.len();
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (x, _) in train {
        for k in 0..d {
            mu[k] += x[k] / train.len() as f64;
        }
    }
    for (x, _) in train {
        for k in 0..d {
            sd[k] += (x[k] - mu[k]).powi(2) / train.len() as f64;
        }
    }
    let sd: Vector = sd.into_iter().map(|v| v.sqrt().max(1e-12)).collect();
    let scale = |x: &Vector| -> Vector { (0..d).map(|k| (x[k] - mu[k]) / sd[k]).collect() };
    let train: Vec<(Vector, f64)> = train.iter().map(|(x, y)| (scale(x), *y)).collect();
    let mut w = vec![0.0; d + 1];
    for _ in 0..300 {
        let mut grad = vec![0.0; d + 1];
        for (x, y) in &train {
            let p = sigmoid(w[d] + dot(&w[..d], x));
            for k in 0..d {
                grad[k] += (p - y) * x[k];
            }
            grad[d] += p - y;
        }
        for k in 0..=d {
            w[k] -= 0.5 * (grad[k] / train.len() as f64 + 1e-4 * w[k] * (k < d) as u8 as f64);
        }
    }
    let hits = test
        .iter()
        .filter(|(x, y)| (sigmoid(w[d] + dot(&w[..d], &scale(x))) > 0.5) == (*y == 1.0))
        .count();
    hits as f64 / test.len() as f64
}

/// Least-squares `W` with `txt ~ W img`, fitted on real records.
fn cross_modal_map(records: &[FeatureRecord]) -> Vec<Vector> {
    let d = records[0].img.len();
    let real: Vec<&FeatureRecord> = records.iter().filter(|r| r.label == Label::Real).collect();
    let mut gram = vec![vec![0.0; d]; d];
    let mut rhs = vec![vec![0.0; d]; d];
    for r in &real {
        for a in 0..d {
            for b in 0..d {
                gram[a][b] += r.img[a] * r.img[b];
                rhs[a][b] += r.img[a] * r.txt[b];
            }
        }
    }
    for (a, row) in gram.iter_mut().enumerate() {
        row[a] += 1e-6 * real.len() as f64;
    }
    for col in 0..d {
        let pivot = (col..d).max_by(|&x, &y| gram[x][col].abs().total_cmp(&gram[y][col].abs())).unwrap();
        gram.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in 0..d {
            if row != col {
                let f = gram[row][col] / gram[col][col];
                for k in 0..d {
                    gram[row][k] -= f * gram[col][k];
                    rhs[row][k] -= f * rhs[col][k];
                }
            }
        }
    }
    (0..d).map(|a| rhs[a].iter().map(|v| v / gram[a][a]).collect()).collect()
}

fn residual_features(records: &[FeatureRecord], map: &[Vector]) -> Vec<(Vector, f64)> {
    records
        .iter()
        .map(|r| {
            let d = r.img.len();
            let residual = (0..d).map(|b| {
                let predicted: f64 = (0..d).map(|a| r.img[a] * map[a][b]).sum();
                (r.txt[b] - predicted).powi(2)
            });
            let x = r.img.iter().chain(&r.txt).cloned().chain(residual).collect();
            (x, (r.label == Label::Fake) as u8 as f64)
        })
        .collect()
}

#[test]
fn default_corpus_is_separable_by_a_logistic_model() {
    let records = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train, _, test) = split(&records, SplitRatios::default(), 0).unwrap();
    let map = cross_modal_map(&train);
    let acc = logistic_accuracy(&residual_features(&train, &map), &residual_features(&test, &map));
    assert!(acc >= 0.9, "logistic oracle accuracy {acc}");
}

#[test]
fn seeded_forward_matches_golden_values() {
    use coolant::aggregation::{aggregate, classify, modality_attention};
    use coolant::encoders::{encode, posterior, project_shared};
    use coolant::fusion::fuse;
    use coolant::model::Modality;

    let golden: std::collections::HashMap<String, Vector> =
        serde_json::from_str(include_str!("golden/seed42_ones8.json")).unwrap();
    let params = Params::init(&Architecture { d_in: 8, ..Architecture::default() }, 42, 0.07);
    let x = vec![1.0; 8];
    let e_img = encode(Modality::Image, &x, &params).unwrap();
    let e_txt = encode(Modality::Text, &x, &params).unwrap();
    let m_img = project_shared(Modality::Image, &e_img, &params).unwrap();
    let m_txt = project_shared(Modality::Text, &e_txt, &params).unwrap();
    let q_img = posterior(Modality::Image, &m_img, &params).unwrap();
    let q_txt = posterior(Modality::Text, &m_txt, &params).unwrap();
    let fused = fuse(&m_img, &m_txt, &params.fusion).unwrap().projected;
    let gates = modality_attention(&m_img, &m_txt, &fused, &params.gate).unwrap();
    let probs = classify(&aggregate(&gates, &m_img, &m_txt, &fused), &params.classifier).unwrap();
    let got: [(&str, &[f64]); 11] = [
        ("e_img", &e_img),
        ("e_txt", &e_txt),
        ("m_img", &m_img),
        ("m_txt", &m_txt),
        ("mean_img", q_img.mean()),
        ("stddev_img", q_img.stddev()),
        ("mean_txt", q_txt.mean()),
        ("stddev_txt", q_txt.stddev()),
        ("fused", &fused),
        ("gates", &gates.raw),
        ("probs", probs.as_slice()),
    ];
    for (name, values) in got {
        let want = &golden[name];
        assert_eq!(values.len(), want.len(), "{name}");
        for (a, b) in values.iter().zip(want) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{name}: {a} vs {b}");
        }
    }
}
