//! One function per subcommand; each reads the previous stage's files.

use std::fs::File;
use std::io::BufWriter;
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use semiopf::augment::{
    branch_set_from_labels, fit_ridge_y, pseudo_label, ridge_errors, sample_demands, Dataset, Label,
    Provenance, PseudoLabelReport, ReducedBranchSet, RidgeModel,
};
use semiopf::eval::{evaluate, markdown_table, EvalReport};
use semiopf::opf::{solve_batch, OpfOptions, OpfSolver, OpfStatus};
use semiopf::trainer::{train, Fcnn, TrainInputs};
use semiopf::{FdpfSolver, Mode, Network};

use crate::artifacts::{self as art, read_demands, write_demands, MissingArtifact, Store};
use crate::config::RunConfig;

pub struct Ctx {
    pub cfg: RunConfig,
    pub net: Network,
    pub store: Store,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> anyhow::Result<Self> {
        let net = cfg.network()?;
        let store = Store::new(&cfg.out, cfg.hash())?;
        Ok(Self { cfg, net, store })
    }

    fn demands(&self) -> anyhow::Result<Vec<Vec<f64>>> {
        let p = self.store.require_with_meta(art::DEMANDS)?;
        let d = read_demands(&p, &self.net)?;
        if d.len() != self.cfg.data.samples {
            bail!(
                "{} holds {} samples, config asks for {}; rerun `semiopf gen-demands`",
                p.display(),
                d.len(),
                self.cfg.data.samples
            );
        }
        Ok(d)
    }

    /// `(train, validation, test)` slices of the demand file.
    fn splits(&self, all: &[Vec<f64>]) -> [Vec<Vec<f64>>; 3] {
        let [tr, va, _] = self.cfg.split_counts();
        [
            all[..tr].to_vec(),
            all[tr..tr + va].to_vec(),
            all[tr + va..].to_vec(),
        ]
    }
}

pub fn gen_demands(ctx: &Ctx) -> anyhow::Result<()> {
    let c = &ctx.cfg;
    let d = sample_demands(&ctx.net, c.data.samples, (c.data.scale_range[0], c.data.scale_range[1]), c.seed)?;
    write_demands(&ctx.store.path(art::DEMANDS), &ctx.net, &d)?;
    ctx.store.write_meta(art::DEMANDS, "gen-demands")?;
    let [tr, va, te] = c.split_counts();
    println!("wrote {} demand samples ({tr} train / {va} validation / {te} test)", d.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefEntry {
    pub index: usize,
    pub status: Option<OpfStatus>,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub solve_time_s: f64,
    pub label: Option<Label>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefLabels {
    pub entries: Vec<RefEntry>,
    pub failures: Vec<usize>,
    pub wall_s: f64,
}

fn ref_entry(net: &Network, index: usize, x: &[f64], r: semiopf::Result<semiopf::opf::OpfSolution>) -> RefEntry {
    match r {
        Ok(s) if s.status == OpfStatus::Optimal => RefEntry {
            index,
            status: Some(s.status),
            objective: Some(s.objective),
            iterations: s.iterations,
            solve_time_s: s.solve_time_s,
            label: Some(Label::from_state(net, &s.state, s.y(net), x, Some(s.objective))),
            error: None,
        },
        Ok(s) => RefEntry {
            index,
            status: Some(s.status),
            objective: None,
            iterations: s.iterations,
            solve_time_s: s.solve_time_s,
            label: None,
            error: Some(format!("status {:?}", s.status)),
        },
        Err(e) => RefEntry {
            index,
            status: None,
            objective: None,
            iterations: 0,
            solve_time_s: 0.0,
            label: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn solve_ref(ctx: &Ctx) -> anyhow::Result<()> {
    let all = ctx.demands()?;
    let [train, _, _] = ctx.splits(&all);
    let mut budget = ctx.cfg.data.labeled;
    if budget > train.len() {
        log::warn!("labeled budget {budget} exceeds the {} training samples; clamping", train.len());
        budget = train.len();
    }
    let t0 = Instant::now();
    let sols = solve_batch(&ctx.net, &train[..budget], OpfOptions::default());
    let wall_s = t0.elapsed().as_secs_f64();
    let entries: Vec<RefEntry> = sols
        .into_iter()
        .enumerate()
        .map(|(k, r)| ref_entry(&ctx.net, k, &train[k], r))
        .collect();
    let failures: Vec<usize> = entries.iter().filter(|e| e.label.is_none()).map(|e| e.index).collect();
    for &f in &failures {
        log::warn!("reference OPF failed on training sample {f}: {}", entries[f].error.as_deref().unwrap_or("?"));
    }
    println!(
        "solved {} reference OPFs in {wall_s:.2}s ({} failed)",
        entries.len(),
        failures.len()
    );
    ctx.store.write_json(art::LABELS, "solve-ref", &RefLabels { entries, failures, wall_s })?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeArtifact {
    pub model: RidgeModel,
    pub fit_samples: usize,
    pub val_samples: usize,
    /// Mean per-sample l2 error on held-out labels (P_g block, V block).
    pub val_err_p: Option<f64>,
    pub val_err_v: Option<f64>,
    pub train_report: PseudoLabelReport,
    pub val_report: PseudoLabelReport,
}

pub fn pseudo_label_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let all = ctx.demands()?;
    let [train_x, val_x, _] = ctx.splits(&all);
    let refs: RefLabels = ctx.store.read_json(art::LABELS)?;

    let mut train_set = Dataset::unlabeled(train_x);
    let good: Vec<&RefEntry> = refs.entries.iter().filter(|e| e.label.is_some()).collect();
    for e in &good {
        train_set.labels[e.index] = e.label.clone();
        train_set.provenance[e.index] = Provenance::GroundTruth;
    }
    let n_fit = ((good.len() as f64) * ctx.cfg.data.ridge_train_fraction).round() as usize;
    let mut fit = Dataset::default();
    let mut held = Dataset::default();
    for (k, e) in good.iter().enumerate() {
        let target = if k < n_fit { &mut fit } else { &mut held };
        target.push(train_set.demands[e.index].clone(), e.label.clone(), Provenance::GroundTruth);
    }
    let model = fit_ridge_y(&ctx.net, &fit, ctx.cfg.ridge.alpha_p, ctx.cfg.ridge.alpha_v)?;
    let (val_err_p, val_err_v) = if held.is_empty() {
        (None, None)
    } else {
        let (p, v) = ridge_errors(&ctx.net, &model, &held);
        (Some(p), Some(v))
    };

    let solver = FdpfSolver::new(&ctx.net)?;
    let train_report = pseudo_label(&model, &mut train_set, &ctx.net, &solver);
    let mut val_set = Dataset::unlabeled(val_x);
    let val_report = pseudo_label(&model, &mut val_set, &ctx.net, &solver);
    println!(
        "ridge fit on {} labels; held-out l2 error P_g {} V {}",
        fit.len(),
        val_err_p.map_or("n/a".into(), |v| format!("{v:.4}")),
        val_err_v.map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    println!(
        "pseudo labels: {} train ({} diverged), {} validation ({} diverged)",
        train_report.labeled,
        train_report.diverged.len(),
        val_report.labeled,
        val_report.diverged.len()
    );
    ctx.store.write_json(art::TRAIN_SET, "pseudo-label", &train_set)?;
    ctx.store.write_json(art::VAL_SET, "pseudo-label", &val_set)?;
    ctx.store.write_json(
        art::RIDGE,
        "pseudo-label",
        &RidgeArtifact {
            model,
            fit_samples: fit.len(),
            val_samples: held.len(),
            val_err_p,
            val_err_v,
            train_report,
            val_report,
        },
    )?;
    Ok(())
}

pub fn branch_set(ctx: &Ctx) -> anyhow::Result<()> {
    let data: Dataset = ctx.store.read_json(art::TRAIN_SET)?;
    let set = branch_set_from_labels(&ctx.net, &data, ctx.cfg.train.beta)?;
    println!(
        "reduced branch set at beta {}: {} of {} branches",
        set.beta,
        set.members.len(),
        ctx.net.n_branch()
    );
    ctx.store.write_json(art::BRANCH_SET, "branch-set", &set)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config_hash: String,
    pub mode: Mode,
    pub widths: Vec<usize>,
    pub param_count: usize,
    pub cost_scale: f64,
    pub active_branches: Vec<usize>,
    pub epochs: usize,
    pub train_wall_s: f64,
    pub final_loss: f64,
    pub fdpf_failures: usize,
}

fn modes_arg(mode: Option<Mode>, default: Mode) -> Mode {
    mode.unwrap_or(default)
}

pub fn train_cmd(ctx: &Ctx, mode: Option<Mode>) -> anyhow::Result<()> {
    let mut tc = ctx.cfg.train_config();
    tc.mode = modes_arg(mode, tc.mode);
    let data: Dataset = ctx.store.read_json(art::TRAIN_SET)?;
    let val: Dataset = ctx.store.read_json(art::VAL_SET)?;
    let reduced: Option<ReducedBranchSet> = if tc.mode.reduced() {
        let set: ReducedBranchSet = ctx.store.read_json(art::BRANCH_SET)?;
        if set.beta != tc.beta {
            return Err(MissingArtifact(format!(
                "branch set was built for beta {}, config has {}; rerun `semiopf branch-set`",
                set.beta, tc.beta
            ))
            .into());
        }
        Some(set)
    } else {
        None
    };
    let name = tc.mode.name();
    let log_path = ctx.store.path(&art::train_log_file(name));
    let mut log = csv::Writer::from_path(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    log.write_record([
        "epoch",
        "phase",
        "lr",
        "total",
        "l_o",
        "l_s",
        "l_c_z2",
        "l_c_vd",
        "l_wp",
        "wall_s",
        "fdpf_s",
        "jacobian_s",
        "ksolve_s",
        "backward_s",
        "fdpf_failures",
        "val_sup",
        "val_full",
    ])?;
    ctx.store.write_meta(&art::train_log_file(name), "train")?;
    let mut log_err: Option<anyhow::Error> = None;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let run = train(
        &ctx.net,
        &data,
        &tc,
        TrainInputs {
            reduced: reduced.as_ref(),
            validation: Some(&val),
        },
        |e| {
            let rec = [
                e.epoch.to_string(),
                e.phase.name().to_string(),
                e.lr.to_string(),
                e.loss.total.to_string(),
                e.loss.l_o.to_string(),
                e.loss.l_s.to_string(),
                e.loss.l_c_z2.to_string(),
                e.loss.l_c_vd.to_string(),
                e.loss.l_wp.to_string(),
                e.wall_s.to_string(),
                e.times.fdpf_s.to_string(),
                e.times.jacobian_s.to_string(),
                e.times.ksolve_s.to_string(),
                e.times.backward_s.to_string(),
                e.fdpf_failures.to_string(),
                opt(e.val_sup),
                opt(e.val_full),
            ];
            if let Err(err) = log.write_record(&rec).and_then(|_| log.flush().map_err(Into::into)) {
                log_err.get_or_insert(err.into());
            }
            println!(
                "epoch {:>3} {:<6} loss {:.6} failures {} {:.2}s",
                e.epoch,
                e.phase.name(),
                e.loss.total,
                e.fdpf_failures,
                e.wall_s
            );
        },
    );
    log.flush()?;
    let run = run?;
    if let Some(e) = log_err {
        return Err(e.context(format!("writing {}", log_path.display())));
    }
    let mpath = ctx.store.path(&art::model_file(name));
    run.model
        .write_checkpoint(BufWriter::new(File::create(&mpath)?))
        .with_context(|| format!("writing {}", mpath.display()))?;
    let last = run.epochs.last();
    let meta = ModelMeta {
        config_hash: ctx.store.hash.clone(),
        mode: tc.mode,
        widths: run.model.widths(),
        param_count: run.param_count,
        cost_scale: run.cost_scale,
        active_branches: run.branches.clone(),
        epochs: run.epochs.len(),
        train_wall_s: run.epochs.iter().map(|e| e.wall_s).sum(),
        final_loss: last.map_or(f64::NAN, |e| e.loss.total),
        fdpf_failures: run.epochs.iter().map(|e| e.fdpf_failures).sum(),
    };
    let meta_path = ctx.store.path(&format!("{}.meta.json", art::model_file(name)));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    println!(
        "saved {} ({} parameters, {:.1}s training)",
        mpath.display(),
        meta.param_count,
        meta.train_wall_s
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReference {
    pub costs: Vec<Option<f64>>,
    pub failures: Vec<usize>,
    /// Serial wall time over all test samples.
    pub t_opt_s: f64,
}

fn test_reference(ctx: &Ctx, test: &[Vec<f64>]) -> anyhow::Result<TestReference> {
    if ctx.store.exists(art::TEST_REFERENCE) {
        if let Ok(r) = ctx.store.read_json::<TestReference>(art::TEST_REFERENCE) {
            if r.costs.len() == test.len() {
                return Ok(r);
            }
        }
    }
    println!("solving {} reference OPFs for the test split", test.len());
    let solver = OpfSolver::new(&ctx.net, OpfOptions::default());
    let t0 = Instant::now();
    let costs: Vec<Option<f64>> = test
        .iter()
        .map(|x| match solver.solve(x) {
            Ok(s) if s.status == OpfStatus::Optimal => Some(s.objective),
            _ => None,
        })
        .collect();
    let t_opt_s = t0.elapsed().as_secs_f64();
    let failures = costs.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(k, _)| k).collect();
    let r = TestReference {
        costs,
        failures,
        t_opt_s,
    };
    ctx.store.write_json(art::TEST_REFERENCE, "eval", &r)?;
    Ok(r)
}

fn load_model(ctx: &Ctx, mode: Mode) -> anyhow::Result<Fcnn> {
    let name = art::model_file(mode.name());
    let path = ctx.store.path(&name);
    if !path.exists() {
        return Err(MissingArtifact(format!(
            "model checkpoint not found: {} (run `semiopf train --mode {}` first)",
            path.display(),
            mode
        ))
        .into());
    }
    let meta_path = ctx.store.path(&format!("{name}.meta.json"));
    let meta: ModelMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?,
    )?;
    if meta.config_hash != ctx.store.hash {
        return Err(MissingArtifact(format!(
            "{} was trained under another config; rerun `semiopf train --mode {mode}`",
            path.display()
        ))
        .into());
    }
    let model = Fcnn::read_checkpoint(std::io::BufReader::new(File::open(&path)?))?;
    if model.n_in() != 2 * ctx.net.n_bus() || model.n_out() != ctx.net.partition().y_len() {
        bail!("{} does not match the case dimensions", path.display());
    }
    Ok(model)
}

pub fn eval_cmd(ctx: &Ctx, mode: Option<Mode>) -> anyhow::Result<()> {
    let mode = modes_arg(mode, ctx.cfg.train.mode);
    let model = load_model(ctx, mode)?;
    let all = ctx.demands()?;
    let [_, _, test] = ctx.splits(&all);
    let reference = test_reference(ctx, &test)?;
    let solver = FdpfSolver::new(&ctx.net)?;
    let report = evaluate(&ctx.net, &model, &solver, &test, &reference.costs, mode.name())?
        .with_reference_time(reference.t_opt_s);
    println!("{}", markdown_table(std::slice::from_ref(&report)));
    ctx.store.write_json(&art::eval_file(mode.name()), "eval", &report)?;
    Ok(())
}

pub fn report(ctx: &Ctx) -> anyhow::Result<()> {
    let mut reports: Vec<EvalReport> = Vec::new();
    for m in Mode::ALL {
        let name = art::eval_file(m.name());
        if ctx.store.exists(&name) {
            reports.push(ctx.store.read_json(&name)?);
        }
    }
    if reports.is_empty() {
        return Err(MissingArtifact("no evaluation results found: run `semiopf eval` first".into()).into());
    }
    let mut md = String::from("# Evaluation\n\n");
    md.push_str(&format!("case `{}`, config hash `{}`\n\n", ctx.cfg.case, &ctx.store.hash[..12]));
    if let Ok(r) = ctx.store.read_json::<RidgeArtifact>(art::RIDGE) {
        md.push_str(&format!(
            "ridge held-out l2 error: P_g {}, V {}\n\n",
            r.val_err_p.map_or("n/a".into(), |v| format!("{v:.4}")),
            r.val_err_v.map_or("n/a".into(), |v| format!("{v:.4}"))
        ));
    }
    md.push_str(&markdown_table(&reports));
    let path = ctx.store.path("report.md");
    std::fs::write(&path, &md)?;
    ctx.store.write_json("report.json", "report", &reports)?;
    print!("{md}");
    Ok(())
}
