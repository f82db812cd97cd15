//! Scratch calibration probe; not part of the deliverable.

use std::path::PathBuf;

use stqa_core::data::synth::{self, SynthConfig};
use stqa_core::data::Dataset;
use stqa_core::model::{Model, StreamChannelConfig, TextChannelConfig};
use stqa_core::train::{train_channel, TrainConfig};
use stqa_core::video::StreamKind;

fn probe(model: &Model, ds: &Dataset) {
    use stqa_core::scoring::lsep_loss;
    use stqa_core::Tape;
    if let stqa_core::ChannelConfig::Stream { cfg, .. } = model.config() {
        let ex = ds.example(0).unwrap();
        let clip = ex.clip.as_ref().unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let frames = tape.leaf(clip.stream(cfg.kind));
        let v = stqa_core::video::extract_visual_features(
            &mut tape, &bound, "vext", &cfg.stream, frames,
        )
        .unwrap();
        let vals = tape.value(v);
        let n = tape.shape(v)[0];
        let d = tape.shape(v)[1];
        for t in 0..n {
            let row = &vals[t * d..(t + 1) * d];
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!("v[{t}] norm {norm:.4} max {mx:.4}");
        }
    }
    for idx in [0usize, 1, 2] {
        let ex = ds.example(idx).unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let scores = model
            .forward_scores(&mut tape, &bound, ex.input())
            .unwrap();
        let p = tape.value(scores).to_vec();
        let spread = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - p.iter().cloned().fold(f64::INFINITY, f64::min);
        let loss = lsep_loss(&mut tape, scores, &[ex.pack.correct]).unwrap();
        let lv = tape.item(loss).unwrap();
        tape.backward(loss).unwrap();
        let grads = model.params().collect_grads(&tape, &bound).unwrap();
        println!("ex {idx}: scores {p:?} spread {spread:.3e} loss {lv:.6}");
        for (e, g) in model.params().iter().zip(&grads) {
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            println!("  {:24} {:?} grad_norm {:.3e}", e.name, e.tensor.shape(), norm);
        }
    }
}

/// Ridge-regression linear probe: can class labels be read linearly from
/// the untrained extractor's pooled per-frame features?
fn probe2(model: &Model, ds: &Dataset) {
    use stqa_core::data::QuestionType;
    use stqa_core::Tape;
    let stqa_core::ChannelConfig::Stream { cfg, .. } = model.config() else {
        return;
    };
    let vocab = ds.vocab().clone();
    let motion_ids: Vec<usize> = synth::MOTIONS.iter().map(|(w, _)| vocab.id(w)).collect();
    let color_ids: Vec<usize> = synth::COLORS.iter().map(|(w, _)| vocab.id(w)).collect();

    // Per clip: per-frame feature rows, their time-mean, and the label.
    type Clip = (QuestionType, Vec<Vec<f64>>, Vec<f64>, usize);
    let mut clips: Vec<Clip> = Vec::new();
    for i in 0..ds.len() {
        let r = ds.manifest().records[i].clone();
        let pool = match r.qtype {
            QuestionType::Motion => &motion_ids,
            QuestionType::Color => &color_ids,
            _ => continue,
        };
        let ex = ds.example(i).unwrap();
        let truth = ex.pack.answers[r.correct].ids()[0];
        let label = pool.iter().position(|&id| id == truth).unwrap();
        let clip = ex.clip.as_ref().unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let frames = tape.leaf(clip.stream(cfg.kind));
        let v = stqa_core::video::extract_visual_features(
            &mut tape, &bound, "vext", &cfg.stream, frames,
        )
        .unwrap();
        let vals = tape.value(v);
        let (n, d) = (tape.shape(v)[0], tape.shape(v)[1]);
        let mut rows = Vec::new();
        let mut mean = vec![0.0; d];
        for t in 0..n {
            let row = &vals[t * d..(t + 1) * d];
            rows.push(row.to_vec());
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x / n as f64;
            }
        }
        clips.push((r.qtype, rows, mean, label));
    }
    for qt in [QuestionType::Motion, QuestionType::Color] {
        let subset: Vec<&Clip> = clips.iter().filter(|(t, ..)| *t == qt).collect();
        if subset.is_empty() {
            continue;
        }
        let cut = subset.len() * 4 / 5;
        let (tr, te) = (&subset[..cut], &subset[cut..]);
        // Frame-level ridge, then three readouts.
        let frames_tr: Vec<(&[f64], usize)> = tr
            .iter()
            .flat_map(|(_, rows, _, y)| rows.iter().map(move |r| (r.as_slice(), *y)))
            .collect();
        let w = ridge_fit(&frames_tr);
        let (mut f_hit, mut f_n, mut max_hit) = (0usize, 0usize, 0usize);
        for (_, rows, _, y) in te.iter() {
            let mut best = vec![f64::NEG_INFINITY; 5];
            for r in rows {
                let s = scores(&w, r);
                f_hit += (argmax(&s) == *y) as usize;
                f_n += 1;
                for (b, v) in best.iter_mut().zip(&s) {
                    *b = b.max(*v);
                }
            }
            max_hit += (argmax(&best) == *y) as usize;
        }
        let mean_tr: Vec<(&[f64], usize)> =
            tr.iter().map(|(_, _, m, y)| (m.as_slice(), *y)).collect();
        let wm = ridge_fit(&mean_tr);
        let mean_hit = te
            .iter()
            .filter(|(_, _, m, y)| argmax(&scores(&wm, m)) == *y)
            .count();
        println!(
            "probe {qt:?}: clips {} frame {:.3} clip_max {:.3} clip_mean {:.3}",
            subset.len(),
            f_hit as f64 / f_n as f64,
            max_hit as f64 / te.len() as f64,
            mean_hit as f64 / te.len() as f64,
        );
    }
}

fn argmax(s: &[f64]) -> usize {
    (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap()
}

fn scores(w: &[Vec<f64>], f: &[f64]) -> Vec<f64> {
    let row: Vec<f64> = f.iter().cloned().chain([1.0]).collect();
    (0..5).map(|c| row.iter().zip(w).map(|(x, wr)| x * wr[c]).sum()).collect()
}

/// One-vs-rest ridge to one-hot labels; returns [d+1, 5] weights.
fn ridge_fit(train: &[(&[f64], usize)]) -> Vec<Vec<f64>> {
    let d = train[0].0.len() + 1;
    let k = 5usize;
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![vec![0.0; k]; d];
    for (f, y) in train.iter() {
        let row: Vec<f64> = f.iter().cloned().chain([1.0]).collect();
        for a in 0..d {
            for b in 0..d {
                xtx[a][b] += row[a] * row[b];
            }
            xty[a][*y] += row[a];
        }
    }
    for (a, row) in xtx.iter_mut().enumerate() {
        row[a] += 1e-3;
    }
    // Gaussian elimination, partial pivoting.
    let mut aug: Vec<Vec<f64>> = xtx
        .iter()
        .zip(&xty)
        .map(|(r, t)| r.iter().cloned().chain(t.iter().cloned()).collect())
        .collect();
    for col in 0..d {
        let piv = (col..d).max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs())).unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for x in aug[col].iter_mut() {
            *x /= p;
        }
        for r in 0..d {
            if r != col && aug[r][col] != 0.0 {
                let f = aug[r][col];
                for c in 0..d + k {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
    }
    aug.iter().map(|r| r[d..].to_vec()).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let channel = args.first().map(String::as_str).unwrap_or("text").to_string();
    let get = |i: usize, d: f64| -> f64 { args.get(i).map(|s| s.parse().unwrap()).unwrap_or(d) };
    let questions = get(1, 500.0) as usize;
    let epochs = get(2, 30.0) as usize;
    let batch = get(3, 8.0) as usize;
    let seed = get(4, 0.0) as u64;

    let root = PathBuf::from(format!("/tmp/cal-grid-{channel}-q{questions}"));
    let (mut model, mut cfg, ds) = if channel == "text" {
        if !root.join("manifest").exists() {
            synth::generate(&root, &SynthConfig::text(questions), 0).unwrap();
        }
        let mcfg = TextChannelConfig::default();
        let ds = Dataset::open(&root, mcfg.embed_dim).unwrap();
        let model = Model::init_text(mcfg, ds.vocab(), seed).unwrap();
        (model, TrainConfig::text(), ds)
    } else {
        if !root.join("manifest").exists() {
            synth::generate(&root, &SynthConfig::visual(questions), 0).unwrap();
        }
        let mcfg = StreamChannelConfig::toy(StreamKind::Rgb);
        let ds = Dataset::open(&root, mcfg.embed_dim).unwrap();
        let model = Model::init_stream(mcfg, ds.vocab(), seed).unwrap();
        (model, TrainConfig::visual(), ds)
    };
    if std::env::var("PROBE").is_ok() {
        probe(&model, &ds);
        return;
    }
    if std::env::var("PROBE2").is_ok() {
        probe2(&model, &ds);
        return;
    }
    cfg.max_epochs = epochs;
    cfg.batch_size = batch;
    let t0 = std::time::Instant::now();
    let out = train_channel(&mut model, &ds, &cfg, seed, |r| {
        println!("{:2} loss {:.4} val {:.3}", r.epoch, r.train_loss, r.val_accuracy);
    })
    .unwrap();
    println!(
        "{channel} q={questions} batch={batch} seed={seed} -> best {:.3} @ {:?} stop {:?} in {:.1}s",
        out.best_val_accuracy,
        out.best_epoch,
        out.stop,
        t0.elapsed().as_secs_f64()
    );
}
