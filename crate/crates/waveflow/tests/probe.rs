//! Scratch quality probe against a pre-trained run root; not part of the
//! suite (ignored without the PROBE_ROOT environment variable).

use std::path::Path;
use waveflow::pipeline::dataset::DatasetManifest;
use waveflow::pipeline::sample::{Generator, LoadedAeno, LoadedSno};
use waveflow::pipeline::dataset::Split;
use waveflow::Tensor;

#[test]
fn probe_quality() {
    let Ok(root) = std::env::var("PROBE_ROOT") else {
        return;
    };
    let root = Path::new(&root);
    let data = DatasetManifest::load(&root.join("dataset")).unwrap();
    let dir = root.join("dataset");
    let aeno = LoadedAeno::load(&root.join("aeno/checkpoint.bin")).unwrap();
    let sno = LoadedSno::load(&root.join("sno/checkpoint.bin")).unwrap();

    let mut aeno_errs = Vec::new();
    let mut sno_errs = Vec::new();
    for ev in data.events_in(Split::Test) {
        let coarse = data.load_field(&dir, &ev.coarse).unwrap();
        let fine = data.load_field(&dir, &ev.fine).unwrap();
        let z = aeno.encode(&coarse.data).unwrap();
        let recon = aeno.decode(&z, coarse.grid()).unwrap();
        aeno_errs.push(recon.rel_l2(&coarse.data).unwrap());
        let up = sno.apply(&coarse.data, fine.grid()).unwrap();
        sno_errs.push(up.rel_l2(&fine.data).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("AENO held-out rel-L2: mean {:.4} max {:.4}",
        mean(&aeno_errs), aeno_errs.iter().cloned().fold(0.0, f64::max));
    println!("SNO  held-out rel-L2: mean {:.4} max {:.4}",
        mean(&sno_errs), sno_errs.iter().cloned().fold(0.0, f64::max));

    // Train-split SNO error, for the generalization gap.
    let mut sno_train_errs = Vec::new();
    for ev in data.events_in(Split::Train).iter().take(12) {
        let coarse = data.load_field(&dir, &ev.coarse).unwrap();
        let fine = data.load_field(&dir, &ev.fine).unwrap();
        let up = sno.apply(&coarse.data, fine.grid()).unwrap();
        sno_train_errs.push(up.rel_l2(&fine.data).unwrap());
    }
    println!("SNO  train rel-L2: mean {:.4}", mean(&sno_train_errs));

    // Latent scale over the training split.
    let mut all = Vec::new();
    for ev in data.events_in(Split::Train) {
        let coarse = data.load_field(&dir, &ev.coarse).unwrap();
        let z = aeno.encode(&coarse.data).unwrap();
        all.extend_from_slice(z.data());
    }
    let n = all.len() as f64;
    let m = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    let mx = all.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    println!("latents: mean {m:.4} std {sd:.4} max|z| {mx:.4}");

    // Ground-truth PGV medians per magnitude class over the train split.
    {
        use std::collections::BTreeMap;
        let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for ev in data.events_in(Split::Train) {
            let fine = data.load_field(&dir, &ev.fine).unwrap();
            let phys = waveflow::toydata::to_physical(&fine).unwrap();
            let p = waveflow::metrics::pgv(&phys).unwrap();
            per_class
                .entry(format!("{}", ev.class_magnitude))
                .or_default()
                .extend_from_slice(p.data());
        }
        for (m, mut vals) in per_class {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = waveflow::metrics::percentile_sorted(&vals, 0.5);
            println!("truth PGV median class m={m}: {med:.4} (n={})", vals.len());
        }
    }

    // Band-copy baseline: rel-L2 of the lowpass-only reconstruction, the
    // score a perfect band-limited SNO would get with zero synthesis.
    {
        let mut accum = (0.0f64, 0.0f64);
        let test = data.events_in(Split::Test);
        for ev in &test {
            let fine = data.load_field(&dir, &ev.fine).unwrap();
            let lp = waveflow::subspace::lowpass(&fine, 0.375).unwrap();
            let r = lp.data.rel_l2(&fine.data).unwrap();
            accum.0 += r;
            accum.1 = accum.1.max(r);
        }
        println!(
            "band-copy baseline rel-L2: mean {:.4} max {:.4}",
            accum.0 / test.len() as f64,
            accum.1
        );
    }

    if let Ok(path) = std::env::var("DUMP_CFG") {
        let cfg = waveflow::pipeline::config::RunConfig::default();
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        println!("wrote default config to {path}");
    }

    // Flow diagnostics: distribution match and condition sensitivity.
    {
        let test = data.events_in(Split::Test);
        let ev = test[0];
        let coarse = data.load_field(&dir, &ev.coarse).unwrap();
        let z1_true = aeno.encode(&coarse.data).unwrap();
        let mut rng = waveflow::CounterRng::fork(99, "diag", 0);
        let z0 = Tensor::randn(z1_true.shape(), 1.0, &mut rng);
        let flow = waveflow::pipeline::sample::LoadedFlow::load(
            &root.join("fm/checkpoint.bin"),
        )
        .unwrap();
        let fcfg = waveflow::flowmatch::FlowConfig { t_clip: 1e-3, steps: 50 };
        let zhat = flow.sample_latent(&ev.condition, &z0, &fcfg).unwrap();
        let stats = |t: &Tensor| {
            let d = t.data();
            let n = d.len() as f64;
            let m = d.iter().sum::<f64>() / n;
            let sd = (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            (m, sd)
        };
        println!("z1 true (event 0): mean {:.3} std {:.3}", stats(&z1_true).0, stats(&z1_true).1);
        println!("z1 flow (event 0): mean {:.3} std {:.3}", stats(&zhat).0, stats(&zhat).1);

        // Same noise, different condition: a conditional flow must react.
        let other = test[test.len() - 1];
        let zhat2 = flow.sample_latent(&other.condition, &z0, &fcfg).unwrap();
        println!(
            "condition sensitivity: rel-L2(zhat_c1, zhat_c2) = {:.4} (m {} vs {})",
            zhat.rel_l2(&zhat2).unwrap(),
            ev.condition.magnitude,
            other.condition.magnitude
        );
        // Compare with the encoded latents of the two events.
        let coarse2 = data.load_field(&dir, &other.coarse).unwrap();
        let z1_true2 = aeno.encode(&coarse2.data).unwrap();
        println!(
            "true latent separation: rel-L2(z1_e1, z1_e2) = {:.4}",
            z1_true.rel_l2(&z1_true2).unwrap()
        );
        println!("flow vs true: rel-L2(zhat, z1_true) = {:.4}", zhat.rel_l2(&z1_true).unwrap());
    }

    // Ensemble PGV Pearson straight from the generator, no eval stage.
    let generator = Generator::load(root).unwrap();
    let mut pearsons = Vec::new();
    for (ci, ev) in data.events_in(Split::Test).iter().enumerate() {
        let fine = data.load_field(&dir, &ev.fine).unwrap();
        let truth = waveflow::toydata::to_physical(&fine).unwrap();
        let tp = waveflow::metrics::pgv(&truth).unwrap();
        let mut mean_pgv = Tensor::zeros(tp.shape());
        let n_r = 8;
        for ri in 0..n_r {
            let (mut rng, _) = waveflow::pipeline::sample::sample_rng(7, ci, ri);
            let f = generator
                .generate(&ev.condition, &mut rng, fine.grid(), false, None)
                .unwrap();
            let p = waveflow::toydata::to_physical(&f).unwrap();
            let pv = waveflow::metrics::pgv(&p).unwrap();
            let d = mean_pgv.data_mut();
            for (i, v) in pv.data().iter().enumerate() {
                d[i] += v / n_r as f64;
            }
        }
        pearsons.push(waveflow::metrics::pearson(tp.data(), mean_pgv.data()).unwrap());
    }
    println!("PGV Pearson: mean {:.4} min {:.4}",
        mean(&pearsons), pearsons.iter().cloned().fold(1.0, f64::min));
}
