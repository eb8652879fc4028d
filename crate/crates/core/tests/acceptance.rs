//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (uncaptured) and then asserts its criterion.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng;
use selftaught::backbone::{
    pool_batch, pool_batch_backward, Encoder, EncoderConfig, FeatureMap, ParamState, StatsMode,
};
use selftaught::checkpoint::Checkpoint;
use selftaught::config::TrainConfig;
use selftaught::data::{
    generate_synthetic_domain, load_domain, BBox, Collection, EpisodeItem, Image, LabeledImage,
    Split, TextureFamily,
};
use selftaught::eval::{ablation_grid, confidence_interval, evaluate, EvalOptions, EvalReport};
use selftaught::expand::{rotate_image, rotate_patch};
use selftaught::heads::{
    classify, fewshot_nll, prototypes, Distance, Head, HeadKind, RotationHead,
};
use selftaught::rng::stream;
use selftaught::tensor::Tensor;
use selftaught::trainer::{train_on, Learner, TrainOptions, LATEST};
use selftaught::wsol::{cam, largest_component, recompose, split_fg_bg, Mask, ObjectBox};

const TRAIN_EPISODES: usize = 500;
const EVAL_EPISODES: usize = 600;
const SEEDS: [u64; 3] = [0, 1, 2];
const BASELINE: usize = 0;
const TD_ONLY: usize = 4;
const FULL: usize = 8;

fn report(n: usize, title: &str, pass: bool, detail: &str, took: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {n} [{title}]: {verdict} ({detail}; {:.1}s)\n",
        took.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---- 1. oracle equivalence -------------------------------------------------

fn oracle_bilinear(v: &[f64], h: usize, w: usize, side: usize) -> Vec<f64> {
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n as f64 / side as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::new();
    for oy in 0..side {
        let (y0, y1, fy) = coord(oy, h);
        for ox in 0..side {
            let (x0, x1, fx) = coord(ox, w);
            let at = |y: usize, x: usize| v[y * w + x];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Flood fill from each unvisited pixel; returns (pixel set, tight box) of the
/// component with the most pixels, earliest start on ties.
fn oracle_component(bits: &[bool], h: usize, w: usize) -> Option<(Vec<usize>, BBox)> {
    let mut label = vec![usize::MAX; h * w];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for s in 0..h * w {
        if !bits[s] || label[s] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut stack = vec![s];
        let mut members = Vec::new();
        label[s] = id;
        while let Some(p) = stack.pop() {
            members.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    let q = ny as usize * w + nx as usize;
                    if bits[q] && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    let best = comps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))?
        .1
        .clone();
    let ys = best.iter().map(|p| p / w);
    let xs = best.iter().map(|p| p % w);
    let (t, b) = (ys.clone().min().unwrap(), ys.max().unwrap());
    let (l, r) = (xs.clone().min().unwrap(), xs.max().unwrap());
    Some((
        best,
        BBox {
            top: t,
            left: l,
            height: b - t + 1,
            width: r - l + 1,
        },
    ))
}

fn criterion_one() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());

    // CAM: channel mean then ReLU, bilinear upsampling
    for seed in 0..20 {
        let t = rand_tensor(&[8, 5, 5], 100 + seed);
        let map = FeatureMap::new(t.clone()).unwrap();
        let act = cam(&map, 40);
        let low: Vec<f64> = (0..25)
            .map(|p| ((0..8).map(|d| t.data()[d * 25 + p]).sum::<f64>() / 8.0).max(0.0))
            .collect();
        low.iter().zip(&act.values).for_each(|(a, b)| track(*a, *b));
        oracle_bilinear(&low, 5, 5, 40)
            .iter()
            .zip(&act.upsampled)
            .for_each(|(a, b)| track(*a, *b));
    }

    // prototypes, classify, fewshot_nll
    for seed in 0..20 {
        let way = 5;
        let emb = rand_tensor(&[25, 16], 200 + seed);
        let labels: Vec<usize> = (0..25).map(|i| i % way).collect();
        let ps = prototypes(&emb, &labels, way).unwrap();
        for k in 0..way {
            for d in 0..16 {
                let members: Vec<f64> = (0..25)
                    .filter(|&i| labels[i] == k)
                    .map(|i| emb.item(i)[d])
                    .collect();
                track(
                    ps.protos[k][d],
                    members.iter().sum::<f64>() / members.len() as f64,
                );
            }
        }
        let q = rand_tensor(&[10, 16], 300 + seed);
        let ql: Vec<usize> = (0..10).map(|i| (i * 3) % way).collect();
        for dist in [Distance::SquaredEuclidean, Distance::Euclidean] {
            let mut ce = 0.0;
            for i in 0..10 {
                let sc = classify(q.item(i), &ps, dist).unwrap();
                let d: Vec<f64> = ps
                    .protos
                    .iter()
                    .map(|c| {
                        let s: f64 = c
                            .iter()
                            .zip(q.item(i))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        if dist == Distance::Euclidean {
                            (s + 1e-12).sqrt()
                        } else {
                            s
                        }
                    })
                    .collect();
                let z: f64 = d.iter().map(|v| (-v).exp()).sum();
                for k in 0..way {
                    track(sc.probs[k], (-d[k]).exp() / z);
                }
                ce -= ((-d[ql[i]]).exp() / z).ln();
            }
            track(fewshot_nll(&q, &ql, &ps, dist), ce / 10.0);
        }
    }

    // rotation loss: two-layer ReLU MLP then cross-entropy
    for seed in 0..10 {
        let head = RotationHead {
            feature_dim: 12,
            hidden: 20,
        };
        let params = head.init_params(&mut stream(400 + seed, &[]));
        let emb = rand_tensor(&[9, 12], 500 + seed);
        let labels: Vec<usize> = (0..9).map(|i| (i * 7) % 4).collect();
        let (loss, ..) = head.loss(&params, &emb, &labels).unwrap();
        let w1 = params.get("rot.fc1.weight").unwrap().data();
        let b1 = params.get("rot.fc1.bias").unwrap().data();
        let w2 = params.get("rot.fc2.weight").unwrap().data();
        let b2 = params.get("rot.fc2.bias").unwrap().data();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let x = emb.item(r);
            let hid: Vec<f64> = (0..20)
                .map(|j| (b1[j] + (0..12).map(|i| w1[j * 12 + i] * x[i]).sum::<f64>()).max(0.0))
                .collect();
            let logits: Vec<f64> = (0..4)
                .map(|k| b2[k] + (0..20).map(|j| w2[k * 20 + j] * hid[j]).sum::<f64>())
                .collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            total -= (logits[y].exp() / z).ln();
        }
        track(loss, total / 9.0);
    }

    // largest component: exact against flood fill
    let mut r = stream(600, &[]);
    for trial in 0..1000 {
        let (h, w) = (r.random_range(1..=16), r.random_range(1..=16));
        let density = r.random_range(0.1..0.7);
        let bits: Vec<bool> = (0..h * w).map(|_| r.random_bool(density)).collect();
        let got = largest_component(&Mask::new(h, w, bits.clone()));
        if got != oracle_component(&bits, h, w) {
            return Err(format!("component mismatch on mask {trial} ({h}×{w})"));
        }
    }

    if worst > 1e-6 {
        return Err(format!("max deviation {worst:.3e} > 1e-6"));
    }
    Ok(format!("max deviation {worst:.1e}, 1000 masks exact"))
}

#[test]
fn acceptance_1_oracle_equivalence() {
    let t = Instant::now();
    let res = criterion_one();
    let took = t.elapsed();
    let pass = res.is_ok() && took < Duration::from_secs(60);
    let detail = res.clone().unwrap_or_else(|e| e);
    report(1, "oracle equivalence", pass, &detail, took);
    assert!(pass, "{detail} in {took:?}");
}

// ---- 2. gradient checks ----------------------------------------------------

fn toy_batch(enc: &Encoder, n: usize, seed: u64) -> Tensor {
    let mut r = stream(seed, &[]);
    let side = enc.config().side;
    let imgs: Vec<Image> = (0..n)
        .map(|_| {
            Image::from_pixels(
                side,
                (0..side * side * 3).map(|_| r.random::<f32>()).collect(),
            )
            .unwrap()
        })
        .collect();
    enc.batch_pixels(&imgs).unwrap()
}

/// Largest relative error between analytic gradients and central differences.
fn fd_worst(
    params: &ParamState,
    grads: &ParamState,
    loss: impl Fn(&ParamState) -> f64,
    names: &[&str],
) -> f64 {
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for name in names {
        for i in 0..params.get(name).unwrap().len() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += eps;
            let mut m = params.clone();
            m.get_mut(name).unwrap().data_mut()[i] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            let a = grads.get(name).unwrap().data()[i];
            let scale = fd.abs().max(a.abs());
            if scale > 1e-7 {
                worst = worst.max((fd - a).abs() / scale);
            }
        }
    }
    worst
}

fn criterion_two() -> f64 {
    let enc = Encoder::new(EncoderConfig {
        in_channels: 3,
        width: 4,
        blocks: 2,
        side: 8,
    })
    .unwrap();
    let mut r = stream(700, &[]);
    let way = 2;
    let mut worst: f64 = 0.0;
    for kind in [HeadKind::Proto, HeadKind::Matching, HeadKind::Relation] {
        let head = Head::new(kind, Distance::SquaredEuclidean);
        let mut params = enc.init_params(&mut r);
        for (k, v) in head.init_params(enc.out_channels(), &mut r).iter() {
            params.insert(k, v.clone());
        }
        for (name, t) in params.iter_mut() {
            if name.contains("norm") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += r.random_range(-0.3..0.3));
            }
        }
        let x = toy_batch(&enc, 4, 701);
        let mut buffers = enc.init_buffers();
        enc.forward(&params, StatsMode::Update(&mut buffers, 0.1), &x)
            .unwrap();
        let (sl, ql) = (vec![0, 1], vec![0, 1]);
        let loss = |p: &ParamState| -> f64 {
            let (maps, _) = enc.forward(p, StatsMode::Frozen(&buffers), &x).unwrap();
            head.loss(
                p,
                &maps.slice_items(0, 2),
                &sl,
                &maps.slice_items(2, 4),
                &ql,
                way,
            )
            .unwrap()
            .loss
        };
        let (maps, tape) = enc
            .forward(&params, StatsMode::Frozen(&buffers), &x)
            .unwrap();
        let hl = head
            .loss(
                &params,
                &maps.slice_items(0, 2),
                &sl,
                &maps.slice_items(2, 4),
                &ql,
                way,
            )
            .unwrap();
        let mut grads = params.zeros_like();
        let d = Tensor::concat(&[&hl.d_support, &hl.d_query]).unwrap();
        enc.backward(&params, &tape, &d, &mut grads).unwrap();
        grads.accumulate(&hl.param_grads).unwrap();
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        worst = worst.max(fd_worst(&params, &grads, loss, &refs));
    }

    // rotation head on pooled encoder features, gradients into both
    let rot = RotationHead {
        feature_dim: 4,
        hidden: 6,
    };
    let mut params = enc.init_params(&mut r);
    for (k, v) in rot.init_params(&mut r).iter() {
        params.insert(k, v.clone());
    }
    let x = toy_batch(&enc, 4, 702);
    let buffers = enc.init_buffers();
    let labels = vec![0, 1, 2, 3];
    let loss = |p: &ParamState| -> f64 {
        let (maps, _) = enc.forward(p, StatsMode::Frozen(&buffers), &x).unwrap();
        rot.loss(p, &pool_batch(&maps), &labels).unwrap().0
    };
    let (maps, tape) = enc
        .forward(&params, StatsMode::Frozen(&buffers), &x)
        .unwrap();
    let (_, d_emb, pg) = rot.loss(&params, &pool_batch(&maps), &labels).unwrap();
    let mut grads = params.zeros_like();
    enc.backward(
        &params,
        &tape,
        &pool_batch_backward(&d_emb, maps.shape()[2], maps.shape()[3]),
        &mut grads,
    )
    .unwrap();
    grads.accumulate(&pg).unwrap();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    worst.max(fd_worst(&params, &grads, loss, &refs))
}

#[test]
fn acceptance_2_gradient_checks() {
    let t = Instant::now();
    let worst = criterion_two();
    let took = t.elapsed();
    let pass = worst <= 1e-3 && took < Duration::from_secs(120);
    report(
        2,
        "gradient checks",
        pass,
        &format!("max relative error {worst:.2e}"),
        took,
    );
    assert!(pass, "worst {worst} in {took:?}");
}

// ---- 3. group and round-trip properties -----------------------------------

fn criterion_three() -> Result<String, String> {
    let mut r = stream(800, &[]);
    for side in [1, 2, 7, 24] {
        let img = Image::from_pixels(
            side,
            (0..side * side * 3).map(|_| r.random::<f32>()).collect(),
        )
        .unwrap();
        let mut x = img.clone();
        for _ in 0..4 {
            x = rotate_image(&x, 1);
        }
        if x != img {
            return Err(format!("4 × 90° is not identity at side {side}"));
        }
        let pair = split_fg_bg(&img, None);
        let mut p = pair.foreground.clone();
        for _ in 0..4 {
            p = rotate_patch(&p, 1).unwrap();
        }
        if p != pair.foreground {
            return Err("patch rotation closure".into());
        }
    }
    for _ in 0..200 {
        let side = r.random_range(4..40);
        let img = Image::from_pixels(
            side,
            (0..side * side * 3).map(|_| r.random::<f32>()).collect(),
        )
        .unwrap();
        let s = r.random_range(1..=side);
        let b = ObjectBox {
            top: r.random_range(0..=side - s),
            left: r.random_range(0..=side - s),
            side: s,
        };
        if recompose(&split_fg_bg(&img, Some(b))) != img {
            return Err(format!("split/recompose lost pixels at {b:?}"));
        }
    }

    let cfg = TrainConfig {
        side: 24,
        width: 8,
        blocks: 3,
        way: 3,
        queries_per_class: 2,
        rotation_hidden: 16,
        outer_lr: 1e-3,
        val_every: 0,
        ..TrainConfig::default()
    };
    let l = Learner::new(&cfg).unwrap();
    let mut copy = Learner::new(&TrainConfig {
        seed: 9,
        ..cfg.clone()
    })
    .unwrap();
    copy.load_state(&l.params.clone(), &l.buffers.clone())
        .unwrap();
    if !copy.params.bitwise_eq(&l.params) || !copy.buffers.bitwise_eq(&l.buffers) {
        return Err("clone/load round trip".into());
    }

    let src = generate_synthetic_domain(1, 4, 6, TextureFamily::A, 24).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = |d: &str, resume| TrainOptions {
        out_dir: Some(dir.path().join(d)),
        resume,
        ..TrainOptions::default()
    };
    let full = train_on(
        &TrainConfig {
            episodes: 6,
            ..cfg.clone()
        },
        &opts("full", false),
        &src,
        None,
    )
    .unwrap();
    train_on(
        &TrainConfig {
            episodes: 3,
            ..cfg.clone()
        },
        &opts("split", false),
        &src,
        None,
    )
    .unwrap();
    let ck = Checkpoint::load(&dir.path().join("split").join(LATEST)).unwrap();
    let reloaded = Checkpoint::from_bytes(&ck.to_bytes(), &dir.path().join("mem")).unwrap();
    if !reloaded.params.bitwise_eq(&ck.params) {
        return Err("checkpoint bytes round trip".into());
    }
    let resumed = train_on(
        &TrainConfig { episodes: 6, ..cfg },
        &opts("split", true),
        &src,
        None,
    )
    .unwrap();
    let a: Vec<u64> = full.results[3..].iter().map(|r| r.loss.to_bits()).collect();
    let b: Vec<u64> = resumed.results.iter().map(|r| r.loss.to_bits()).collect();
    if a != b || !full.learner.params.bitwise_eq(&resumed.learner.params) {
        return Err(format!(
            "resumed losses {b:?} differ from uninterrupted {a:?}"
        ));
    }
    Ok("rotation closure, split/recompose, clone/load, resume all exact".into())
}

#[test]
fn acceptance_3_round_trips() {
    let t = Instant::now();
    let res = criterion_three();
    let took = t.elapsed();
    let detail = res.clone().unwrap_or_else(|e| e);
    report(
        3,
        "group and round-trip properties",
        res.is_ok(),
        &detail,
        took,
    );
    assert!(res.is_ok(), "{detail}");
}

// ---- shared training runs (criteria 4 to 7) -------------------------------

/// Serializes expensive work so durations measure CPU time on one core.
static HEAVY: Mutex<()> = Mutex::new(());

struct Trained {
    learner: Learner,
    cfg: TrainConfig,
    seconds: f64,
}

fn memo<K: std::hash::Hash + Eq + Clone + Send + 'static, V: Send + Sync + 'static>(
    table: &'static OnceLock<Mutex<HashMap<K, Arc<OnceLock<Arc<V>>>>>>,
    key: K,
    make: impl FnOnce() -> V,
) -> Arc<V> {
    let cell = table
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(key)
        .or_default()
        .clone();
    cell.get_or_init(|| {
        let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
        Arc::new(make())
    })
    .clone()
}

fn desk(row: usize, seed: u64, episodes: usize) -> TrainConfig {
    ablation_grid()[row].apply(&TrainConfig {
        seed,
        episodes,
        val_every: 0,
        ..TrainConfig::desk()
    })
}

fn domain(cfg: &TrainConfig, name: &str, split: Split) -> Arc<Collection> {
    static TABLE: OnceLock<Mutex<HashMap<(String, Split), Arc<OnceLock<Arc<Collection>>>>>> =
        OnceLock::new();
    memo(&TABLE, (name.to_owned(), split), || {
        load_domain(&cfg.domain(name, split, None).unwrap()).unwrap()
    })
}

fn trained(row: usize, seed: u64, episodes: usize) -> Arc<Trained> {
    static TABLE: OnceLock<Mutex<HashMap<(usize, u64, usize), Arc<OnceLock<Arc<Trained>>>>>> =
        OnceLock::new();
    let cfg = desk(row, seed, episodes);
    let source = domain(&cfg, &cfg.source, Split::Train);
    memo(&TABLE, (row, seed, episodes), move || {
        let t = Instant::now();
        let out = train_on(&cfg, &TrainOptions::default(), &source, None).unwrap();
        Trained {
            learner: out.learner,
            cfg,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

struct Evaluated {
    report: EvalReport,
    seconds: f64,
}

fn evaluated(row: usize, seed: u64, alpha: usize) -> Arc<Evaluated> {
    static TABLE: OnceLock<Mutex<HashMap<(usize, u64, usize), Arc<OnceLock<Arc<Evaluated>>>>>> =
        OnceLock::new();
    let tr = trained(row, seed, TRAIN_EPISODES);
    let target = domain(&tr.cfg, &tr.cfg.target, Split::Test);
    memo(&TABLE, (row, seed, alpha), move || {
        let t = Instant::now();
        let opts = EvalOptions {
            episodes: EVAL_EPISODES,
            alpha,
            ..EvalOptions::from_config(&tr.cfg)
        };
        let report = evaluate(&tr.learner, &target, &tr.cfg, &opts).unwrap();
        Evaluated {
            report,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

// ---- 4. WSOL quality -------------------------------------------------------

#[test]
fn acceptance_4_wsol_quality() {
    let tr = trained(BASELINE, 0, 200);
    let cfg = &tr.cfg;
    let held_out = domain(cfg, &cfg.source, Split::Test);
    let t = Instant::now();
    let mut queues: Vec<VecDeque<&LabeledImage>> = held_out
        .classes
        .iter()
        .map(|c| c.images.iter().collect())
        .collect();
    let mut picked = Vec::new();
    while picked.len() < 200 && queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if let Some(img) = q.pop_front().filter(|_| picked.len() < 200) {
                picked.push(img);
            }
        }
    }
    let items: Vec<EpisodeItem> = picked
        .iter()
        .map(|img| EpisodeItem {
            image: (*img).clone(),
            label: 0,
        })
        .collect();
    let mut ious = Vec::new();
    for chunk in items.chunks(25) {
        let locs = tr
            .learner
            .localize_items(&tr.learner.params, chunk, 1, cfg)
            .unwrap();
        for (it, loc) in chunk.iter().zip(&locs) {
            ious.push(it.image.gt_box.unwrap().iou(&loc.bbox.to_bbox()));
        }
    }
    let took = Duration::from_secs_f64(tr.seconds) + t.elapsed();
    let mut sorted = ious.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[(sorted.len() - 1) / 2] + sorted[sorted.len() / 2]) / 2.0;
    let hit = ious.iter().filter(|&&v| v > 0.0).count() as f64 / ious.len() as f64;
    let pass =
        ious.len() == 200 && median >= 0.3 && hit >= 0.8 && took < Duration::from_secs(15 * 60);
    report(
        4,
        "WSOL quality",
        pass,
        &format!(
            "{} images, median IoU {median:.3}, {:.1}% intersecting",
            ious.len(),
            100.0 * hit
        ),
        took,
    );
    assert!(pass);
}

// ---- 5. learning signal ----------------------------------------------------

#[test]
fn acceptance_5_learning_signal() {
    let e = evaluated(BASELINE, 0, 0);
    let took = Duration::from_secs_f64(trained(BASELINE, 0, TRAIN_EPISODES).seconds + e.seconds);
    let acc = e.report.mean_accuracy;
    let pass = acc >= 0.45 && took < Duration::from_secs(30 * 60);
    report(
        5,
        "learning signal",
        pass,
        &format!("5-way 1-shot accuracy {acc:.4} ± {:.4}", e.report.ci95),
        took,
    );
    assert!(pass);
}

// ---- 6 and 7. component ordering and α behaviour --------------------------

#[test]
fn acceptance_6_ordering() {
    let mut lines = Vec::new();
    let mut holds = 0;
    let mut secs = 0.0;
    for seed in SEEDS {
        let alpha = desk(FULL, seed, TRAIN_EPISODES).alpha;
        let base = evaluated(BASELINE, seed, alpha);
        let td = evaluated(TD_ONLY, seed, alpha);
        let st = evaluated(FULL, seed, alpha);
        secs += [BASELINE, TD_ONLY, FULL]
            .iter()
            .map(|&r| trained(r, seed, TRAIN_EPISODES).seconds)
            .sum::<f64>();
        secs += base.seconds + td.seconds + st.seconds;
        let (b, t, s) = (
            base.report.mean_accuracy,
            td.report.mean_accuracy,
            st.report.mean_accuracy,
        );
        let ok = s >= t && t >= b && s - b >= 0.02;
        holds += ok as usize;
        lines.push(format!("seed {seed}: base {b:.4} td {t:.4} st {s:.4}"));
    }
    let took = Duration::from_secs_f64(secs);
    let pass = holds >= 2 && took < Duration::from_secs(2 * 3600);
    report(
        6,
        "ST ordering",
        pass,
        &format!("{holds}/3 seeds; {}", lines.join(", ")),
        took,
    );
    assert!(pass);
}

#[test]
fn acceptance_7_alpha_behaviour() {
    let mut secs = 0.0;
    let mut mean = |alpha: usize| -> f64 {
        SEEDS
            .iter()
            .map(|&s| {
                let e = evaluated(FULL, s, alpha);
                secs += e.seconds;
                e.report.mean_accuracy
            })
            .sum::<f64>()
            / SEEDS.len() as f64
    };
    let (a0, a4, a6) = (mean(0), mean(4), mean(6));
    secs += SEEDS
        .iter()
        .map(|&s| trained(FULL, s, TRAIN_EPISODES).seconds)
        .sum::<f64>();
    let pass = a4 >= a0 && a6 >= a0;
    report(
        7,
        "alpha behaviour",
        pass,
        &format!("mean over seeds: α=0 {a0:.4}, α=4 {a4:.4}, α=6 {a6:.4}"),
        Duration::from_secs_f64(secs),
    );
    assert!(pass);
}

// ---- 8. statistical harness ------------------------------------------------

#[test]
fn acceptance_8_statistical_harness() {
    let t = Instant::now();
    let mut r = stream(900, &[]);
    let mut exact = true;
    for n in [1usize, 2, 5, 600] {
        let xs: Vec<f64> = (0..n)
            .map(|_| r.random_range(0..=10) as f64 / 10.0)
            .collect();
        let (mean, sd, ci) = confidence_interval(&xs);
        let m = xs.iter().sum::<f64>() / n as f64;
        let s = if n > 1 {
            (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        exact &= mean == m && sd == s && ci == 1.96 * s / (n as f64).sqrt();
    }

    let cfg = desk(BASELINE, 0, 1);
    let target = domain(&cfg, &cfg.target, Split::Test);
    let learner = Learner::new(&cfg).unwrap();
    let rep = {
        let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
        evaluate(
            &learner,
            &target,
            &cfg,
            &EvalOptions {
                episodes: EVAL_EPISODES,
                ..EvalOptions::from_config(&cfg)
            },
        )
        .unwrap()
    };
    let chance = 1.0 / cfg.way as f64;
    let at_chance = (rep.mean_accuracy - chance).abs() <= rep.ci95;
    let pass = exact && at_chance;
    report(
        8,
        "statistical harness",
        pass,
        &format!(
            "closed-form CI {}; untrained accuracy {:.4} ± {:.4} vs chance {chance:.2}",
            if exact { "exact" } else { "MISMATCH" },
            rep.mean_accuracy,
            rep.ci95
        ),
        t.elapsed(),
    );
    assert!(pass);
}
