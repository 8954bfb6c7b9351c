//! Pilot run for the shortcut and disentanglement experiments.
//!
//! `cargo run --release -p dislab-core --example pilot -- seed=1 mode=both`
//! Extra `key=value` pairs override generator and trainer settings.

use std::time::Instant;

use dislab_core::fairaudit::{auroc, probe_leakage, ProbeOptions};
use dislab_core::gradcore::ModelKind;
use dislab_core::synthgen::{generate_dataset, split_dataset, Dataset, GeneratorConfig, Sa, SplitFractions, SplitName};
use dislab_core::trainer::{dr_scores, latents, train, TrainConfig};

fn main() {
    let mut gen = GeneratorConfig {
        confound_rho: 0.9,
        ..GeneratorConfig::default()
    };
    let mut base = TrainConfig::baseline();
    let mut dis = TrainConfig::disentangled(gen.primary_sa);
    let mut mode = "both".to_string();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        let f = || v.parse::<f64>().expect("number");
        match k {
            "seed" => {
                let s: u64 = v.parse().unwrap();
                gen.seed = s;
                base.seed = s;
                dis.seed = s;
            }
            "mode" => mode = v.to_string(),
            "rho" => gen.confound_rho = f(),
            "patients" => gen.n_patients = v.parse().unwrap(),
            "lesion" => gen.lesion_intensity = f(),
            "marginal" => gen.sa_marginals[gen.primary_sa.index()] = f(),
            "strength" => gen.sa_feature_strength = f(),
            "noise" => gen.pixel_noise = f(),
            "epochs" => {
                base.epochs_max = v.parse().unwrap();
                dis.epochs_max = base.epochs_max;
            }
            "patience" => {
                base.patience = v.parse().unwrap();
                dis.patience = base.patience;
            }
            "lr" => {
                base.lr = f();
                dis.lr = f();
            }
            "blr" => base.lr = f(),
            "bbatch" => base.batch_size = v.parse().unwrap(),
            "dbatch" => dis.batch_size = v.parse().unwrap(),
            "lambda_d" => dis.loss.lambda_d = f(),
            "lambda_r" => dis.loss.lambda_r = f(),
            "lambda_sensit" => dis.loss.lambda_sensit = f(),
            "sigma" => dis.noise_sigma = Some(f()),
            "cross" => {
                dis.loss.disent_form = if v == "1" {
                    dislab_core::losses::DisentForm::CrossOnly
                } else {
                    dislab_core::losses::DisentForm::Literal
                }
            }
            "augment" => {
                base.augment = v == "1";
                dis.augment = base.augment;
            }
            _ => panic!("unknown key {k}"),
        }
    }
    let t0 = Instant::now();
    let data = generate_dataset(&gen).unwrap();
    let splits = split_dataset(&data, SplitFractions::default(), gen.seed).unwrap();
    println!("generated {} images in {:.1}s", data.len(), t0.elapsed().as_secs_f64());
    let primary = gen.primary_sa;
    if mode == "both" || mode == "baseline" {
        run(&data, &splits, &base, primary);
    }
    if mode == "both" || mode == "disentangled" {
        run(&data, &splits, &dis, primary);
    }
}

fn run(data: &Dataset, splits: &dislab_core::synthgen::SplitAssignment, cfg: &TrainConfig, primary: Sa) {
    let t0 = Instant::now();
    let state = train(
        data,
        splits,
        cfg,
        None,
        Some(&mut |s: &dislab_core::trainer::TrainState| {
            let r = s.history.epochs.last().unwrap();
            println!(
                "  ep {:2} sig {:.3} loss {:.4} cls {:.4} real {:.4} dis {:.4} | val loss {:.4} f1 {:.3} auroc {:.3} ({:.1}s)",
                r.epoch,
                r.noise_sigma_med.unwrap_or(0.0),
                r.train_loss,
                r.train_classifier,
                r.train_realism,
                r.train_disent,
                r.val_loss,
                r.val_f1,
                r.val_auroc.unwrap_or(f64::NAN),
                s.history.wall_clock_secs.last().unwrap()
            );
            Ok(())
        }),
    )
    .unwrap();
    let params = &state.best_params;
    let test = splits.indices(data, SplitName::Test);
    let y: Vec<u8> = test.iter().map(|&i| data.samples[i].dr_label).collect();
    let scores = dr_scores(params, data, &test).unwrap();
    let dr_auc = auroc(&scores, &y).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let lat = latents(params, data, &all).unwrap();
    let sa: Vec<u8> = all.iter().map(|&i| data.samples[i].sa_group(primary)).collect();
    let feats: Vec<Vec<f64>> = lat
        .iter()
        .map(|l| match cfg.mode {
            ModelKind::Baseline => l.joint().iter().map(|&v| v as f64).collect(),
            ModelKind::Disentangled => l.z_med.iter().map(|&v| v as f64).collect(),
        })
        .collect();
    let probe = probe_leakage(&feats, &sa, cfg.seed, &ProbeOptions::default()).unwrap();
    let sens: Vec<Vec<f64>> = lat
        .iter()
        .map(|l| l.z_sensit.iter().map(|&v| v as f64).collect())
        .collect();
    let sens_probe = probe_leakage(&sens, &sa, cfg.seed, &ProbeOptions::default()).unwrap();
    println!("z_sensit probe {sens_probe:.4}");
    println!(
        "{:?}: best epoch {:?}, test DR AUROC {dr_auc:.4}, {primary} probe AUROC {probe:.4}, {:.1}s",
        cfg.mode,
        state.history.best_epoch,
        t0.elapsed().as_secs_f64()
    );
}
