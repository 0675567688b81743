use timegraph::config::TrainConfig;
use timegraph::data::stratified_split;
use timegraph::model::{forward_batch, ForwardMode, ModelState};
use timegraph::losses::LossWeights;
use timegraph::augment::AugmentConfig;
use timegraph::tensor::Tape;

fn main() {
    let config = TrainConfig::default();
    let cohort = config.load_cohort(42).unwrap();
    let split = stratified_split(&cohort, config.split, 42).unwrap();
    let mc = config.model_config(8, 4, 3);
    let state = ModelState::init(mc, 42, None).unwrap();

    // Collect per-sample probs AND raw mu statistics at init.
    let idx: Vec<usize> = split.train.iter().take(600).cloned().collect();
    let samples: Vec<&timegraph::data::WindowedSample> = idx.iter().map(|&i| &cohort.samples[i]).collect();
    let tape = Tape::new();
    let attached = state.attach(&tape);
    let arts = forward_batch(&attached, &samples, &LossWeights::default(), &AugmentConfig::default(), &mut ForwardMode::Eval, false).unwrap();

    // E-level signal: does E_t[a][b] differ between carriers and non-carriers?
    // label 0: pair (0,1), window 1.
    let mut pos_e = Vec::new();
    let mut neg_e = Vec::new();
    for (s, &i) in samples.iter().zip(&idx) {
        let _ = i;
        // recompute E directly
        let emb = timegraph::lstm::embed_windows(&s.x, &state.lstm).unwrap();
        let e01 = emb.slices[1].at(&[0, 1]);
        if s.labels[0] > 0.5 { pos_e.push(e01); } else { neg_e.push(e01); }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64], m: f64| (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
    let (mp, mn) = (mean(&pos_e), mean(&neg_e));
    let (sp, sn) = (std(&pos_e, mp), std(&neg_e, mn));
    println!("E[0,1,w1]: pos mean {:.5} (sd {:.5}, n={}), neg mean {:.5} (sd {:.5}, n={}), standardized diff {:.3}",
        mp, sp, pos_e.len(), mn, sn, neg_e.len(), (mp - mn) / ((sp * sp + sn * sn) / 2.0f64).sqrt());

    // Raw input signal for comparison: sum over window of x_a*x_b.
    let mut pos_r = Vec::new();
    let mut neg_r = Vec::new();
    for (s, _) in samples.iter().zip(&idx) {
        let mut prod = 0.0;
        for j in 0..4 { prod += s.x.at(&[0, j, 1]) * s.x.at(&[1, j, 1]); }
        if s.labels[0] > 0.5 { pos_r.push(prod); } else { neg_r.push(prod); }
    }
    let (mp, mn) = (mean(&pos_r), mean(&neg_r));
    let (sp, sn) = (std(&pos_r, mp), std(&neg_r, mn));
    println!("raw sum x0*x1 in w1: pos {:.4} neg {:.4} standardized {:.3}", mp, mn, (mp - mn) / ((sp * sp + sn * sn) / 2.0f64).sqrt());

    // Probs variance across samples at init.
    let p0: Vec<f64> = arts.probs.iter().map(|p| p[0]).collect();
    println!("prob[0] across samples: mean {:.4} sd {:.6}", mean(&p0), std(&p0, mean(&p0)));
}
