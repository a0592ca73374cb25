//! Two-site generalization experiment: local-only models against a FedSGD
//! model, each scored on the other site's test split.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use ucfed_core::exam::Exam;
use ucfed_core::fed::local::LocalTrainer;
use ucfed_core::fed::{Sharable, Validator};
use ucfed_core::metrics::{evaluate, Confusion};
use ucfed_core::rng::derive_seed;
use ucfed_core::synth::{synth_split, SiteProfile};
use ucfed_core::ucnet::ModelParams;
use ucfed_transport::config::PathList;
use ucfed_transport::session::{site_from_exams, site_loader};
use ucfed_transport::{simulate_sites, FedConfig};

/// Below this TPR a checkpoint is treated as calling every lesion negative.
pub const COLLAPSED_TPR: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct CrossSiteConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub extent: [usize; 3],
    pub rounds: u32,
    pub batch_size: usize,
    pub base_channels: usize,
    pub validate_every: u32,
}

impl Default for CrossSiteConfig {
    fn default() -> Self {
        CrossSiteConfig {
            seed: 0,
            train: 200,
            val: 40,
            test: 100,
            extent: [16, 16, 8],
            rounds: 300,
            batch_size: 2,
            base_channels: 4,
            validate_every: 25,
        }
    }
}

pub const SITES: [&str; 2] = ["lesion-graded", "exam-graded"];

pub fn site_profiles(extent: [usize; 3]) -> [SiteProfile; 2] {
    let mut a = SiteProfile::ucsf_like();
    let mut b = SiteProfile::ucla_like();
    a.extent = extent;
    b.extent = extent;
    [a, b]
}

struct SiteData {
    train: Vec<Exam>,
    val: Vec<Exam>,
    test: Vec<Exam>,
}

/// Outcome for one seed. Models are `local-<site>` and `fl-<site>`; the
/// federated model named after a site is the one that site selected.
#[derive(Debug, Clone)]
pub struct CrossSiteOutcome {
    pub seed: u64,
    /// (model, test site) → confusion counts.
    pub grid: BTreeMap<(String, String), Confusion>,
    /// Round each model was selected at by its site's validation.
    pub selected_round: BTreeMap<String, u32>,
}

impl CrossSiteOutcome {
    pub fn accuracy(&self, model: &str, site: &str) -> f64 {
        self.grid[&(model.to_string(), site.to_string())].accuracy().unwrap_or(0.0)
    }

    /// For each site X: the federated checkpoint X selected, tested on the
    /// other site, scores at least X's local model there.
    pub fn federated_beats_local_cross_site(&self) -> bool {
        (0..2).all(|i| {
            let (own, other) = (SITES[i], SITES[1 - i]);
            self.accuracy(&format!("fl-{own}"), other) >= self.accuracy(&format!("local-{own}"), other)
        })
    }

    /// Federated checkpoints with near-zero TPR on some site.
    pub fn collapsed_federated(&self) -> Vec<(String, String)> {
        self.grid
            .iter()
            .filter(|((m, _), c)| m.starts_with("fl-") && c.tpr().is_some_and(|t| t < COLLAPSED_TPR))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

fn weights_to_model(cfg: &FedConfig, s: &Sharable) -> Result<ModelParams<f32>> {
    Ok(ModelParams::from_trainable(cfg.model_config(), s.to_dense::<f32>()?)?)
}

pub fn fed_config(c: &CrossSiteConfig, scratch: &Path) -> FedConfig {
    FedConfig {
        n_clients: 2,
        rounds: c.rounds,
        batch_size: c.batch_size,
        seed: c.seed,
        base_channels: c.base_channels,
        validate_every: c.validate_every,
        checkpoint_every: 0,
        dataset_dir: PathList::default(),
        checkpoint_dir: scratch.to_path_buf(),
        ..FedConfig::default()
    }
}

/// Runs the experiment for one seed, keeping all data in memory. `scratch`
/// receives the federated checkpoints and private logs.
pub fn run_cross_site(c: &CrossSiteConfig, scratch: &Path) -> Result<CrossSiteOutcome> {
    let cfg = fed_config(c, scratch);
    let data: Vec<SiteData> = site_profiles(c.extent)
        .iter()
        .enumerate()
        .map(|(i, p)| -> Result<SiteData> {
            let seed = derive_seed(c.seed, &[i as u64]);
            Ok(SiteData {
                train: synth_split(p, "train", c.train, seed)?,
                val: synth_split(p, "val", c.val, seed)?,
                test: synth_split(p, "test", c.test, seed)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut models: Vec<(String, ModelParams<f32>)> = Vec::new();
    let mut selected_round = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        let name = format!("local-{}", SITES[i]);
        let loader = site_loader(&cfg, i as u32, Arc::new(d.train.clone()));
        let validator = Validator::new(i as u32, Arc::new(d.val.clone()), c.validate_every, cfg.train_config(), None);
        let model = ModelParams::<f32>::build(cfg.model_config())?;
        let mut local = LocalTrainer::new(model, cfg.hyper(), cfg.train_config(), loader, validator);
        local.run(c.rounds).with_context(|| format!("training {name}"))?;
        let (round, model) = match local.validator().best() {
            Some((r, w)) => (*r, weights_to_model(&cfg, w)?),
            None => (c.rounds, local.model.clone()),
        };
        log::info!("seed {}: {name} selected round {round}", c.seed);
        selected_round.insert(name.clone(), round);
        models.push((name, model));
    }

    let sites = data
        .iter()
        .enumerate()
        .map(|(i, d)| site_from_exams::<f32>(&cfg, i as u32, d.train.clone(), d.val.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let report = simulate_sites(&cfg, sites, |_| {}).context("federated training")?;
    for (i, sel) in report.selected.iter().enumerate() {
        let name = format!("fl-{}", SITES[i]);
        let (round, model) = match sel {
            Some((r, w)) => (*r, weights_to_model(&cfg, w)?),
            None => (report.state.round, report.state.model.clone()),
        };
        log::info!("seed {}: {name} selected round {round}", c.seed);
        selected_round.insert(name.clone(), round);
        models.push((name, model));
    }

    let mut grid = BTreeMap::new();
    for (name, model) in &models {
        for (i, d) in data.iter().enumerate() {
            let r = evaluate(model, &d.test, &cfg.train_config())?;
            grid.insert((name.clone(), SITES[i].to_string()), r.confusion);
        }
    }
    Ok(CrossSiteOutcome {
        seed: c.seed,
        grid,
        selected_round,
    })
}

/// Table-style rendering: one row per model, one column per test site.
pub fn render_grid(o: &CrossSiteOutcome) -> String {
    let mut out = format!("{:<22}", "model \\ test site");
    for s in SITES {
        out.push_str(&format!("{s:>24}"));
    }
    out.push('\n');
    let models: Vec<&String> = {
        let mut m: Vec<&String> = o.grid.keys().map(|(m, _)| m).collect();
        m.dedup();
        m
    };
    for m in models {
        out.push_str(&format!("{m:<22}"));
        for s in SITES {
            out.push_str(&format!("{:>24}", o.grid[&(m.clone(), s.to_string())].to_string()));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn confusion(tp: u32, tn: u32, fp: u32, fn_: u32) -> Confusion {
        let mut c = Confusion::default();
        for (n, p, a) in [(tp, true, true), (tn, false, false), (fp, true, false), (fn_, false, true)] {
            for _ in 0..n {
                c.record(p, a);
            }
        }
        c
    }

    fn outcome(cells: [(&str, &str, Confusion); 8]) -> CrossSiteOutcome {
        CrossSiteOutcome {
            seed: 0,
            grid: cells.into_iter().map(|(m, s, c)| ((m.to_string(), s.to_string()), c)).collect(),
            selected_round: BTreeMap::new(),
        }
    }

    #[test]
    fn comparison_uses_each_sites_own_models_on_the_other_site() {
        let good = confusion(8, 8, 2, 2);
        let poor = confusion(5, 5, 5, 5);
        let all_neg = confusion(0, 10, 0, 12);
        let [a, b] = SITES;
        let o = outcome([
            ("fl-lesion-graded", a, poor),
            ("fl-lesion-graded", b, good),
            ("fl-exam-graded", a, good),
            ("fl-exam-graded", b, poor),
            ("local-lesion-graded", a, good),
            ("local-lesion-graded", b, poor),
            ("local-exam-graded", a, poor),
            ("local-exam-graded", b, good),
        ]);
        assert!(o.federated_beats_local_cross_site());
        assert!(o.collapsed_federated().is_empty());
        assert!((o.accuracy("fl-exam-graded", a) - 0.8).abs() < 1e-12);

        let mut worse = o.clone();
        worse.grid.insert(("fl-exam-graded".into(), a.into()), all_neg);
        assert!(!worse.federated_beats_local_cross_site());
        assert_eq!(worse.collapsed_federated(), vec![("fl-exam-graded".to_string(), a.to_string())]);
        assert!(render_grid(&worse).contains("45.5% [1.00, 0.00]"));
    }
}
