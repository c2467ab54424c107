use std::fs;
use std::path::Path;

use clap::Args;
use loratune::early_exit::{
    run_detector, warmup_reliability, DetectorConfig, ExitDecision, RunOutcome,
};
use loratune::fmt_f64;
use loratune::inter_sched::oracle::brute_force_oracle;
use loratune::inter_sched::{
    check_plan, plan_from_starts, solve_exact, solve_sjf, to_secs, SchedError, SchedInstance,
    SchedulePlan,
};
use loratune::lora_math::flop_accounting;
use loratune::lora_math::oracle::{check_random_specs, CheckPlan};
use loratune::simulator::{
    ablate, emit_gantt, gantt_csv, run, ClusterSpec, PolicyFlags, SimError, SimReport, WorkloadSpec,
};
use loratune::workload::{ingest_trace, read_trace_rows, LossTrajectory};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::manifest::OutputSet;
use crate::{CliError, Method};

pub const FORWARD_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-6;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::Input(m) => CliError::Input(m),
        SimError::Invariant(m) => CliError::Invariant(m),
    }
}

fn sched_err(e: SchedError) -> CliError {
    match e {
        SchedError::Infeasible(m) => CliError::Invariant(m),
        other => CliError::input(other),
    }
}

fn read_trajectory(path: &Path, alpha: f64) -> Result<LossTrajectory, CliError> {
    let named = |e: &dyn std::fmt::Display| CliError::Input(format!("{}: {e}", path.display()));
    let file = fs::File::open(path).map_err(|e| named(&e))?;
    let rows = read_trace_rows(file).map_err(|e| named(&e))?;
    Ok(ingest_trace(&rows, alpha)
        .map_err(|e| named(&e))?
        .trajectory)
}

fn summary_line(r: &SimReport) -> String {
    let loss = r
        .loss_ratio
        .map_or("n/a".to_string(), |v| format!("{v:.4}"));
    format!(
        "{:<8} makespan {:>12.3} s  saved {:>6.2}%  loss_ratio {}",
        r.flags.label(),
        r.makespan,
        100.0 * r.total_saved_fraction(),
        loss
    )
}

fn file_label(flags: PolicyFlags) -> String {
    flags.label().to_ascii_lowercase().replace('+', "_")
}

#[derive(Serialize)]
struct SimConfig<'a> {
    workload: &'a WorkloadSpec,
    cluster: &'a ClusterSpec,
    flags: Option<PolicyFlags>,
    ablate: bool,
}

pub fn simulate(
    workload: &Path,
    cluster: &Path,
    flags: &str,
    seed: u64,
    out: &Path,
    ablate_all: bool,
) -> Result<(), CliError> {
    let wl: WorkloadSpec = read_json(workload)?;
    let cl: ClusterSpec = read_json(cluster)?;
    let flags = PolicyFlags::parse(flags).map_err(sim_err)?;
    let config = SimConfig {
        workload: &wl,
        cluster: &cl,
        flags: (!ablate_all).then_some(flags),
        ablate: ablate_all,
    };
    let mut outputs = OutputSet::new("simulate", &config, Some(seed));
    if ablate_all {
        let a = ablate(&wl, &cl, seed).map_err(sim_err)?;
        for r in a.reports() {
            let label = file_label(r.flags);
            outputs.add_json(&format!("report_{label}.json"), r);
            outputs.add(&format!("gantt_{label}.csv"), gantt_csv(&emit_gantt(r)));
            outputs.add(&format!("samples_saved_{label}.csv"), r.samples_saved_csv());
            println!("{}", summary_line(r));
        }
        for (label, ratio) in &a.ratios {
            println!("makespan(B)/makespan({label}) = {}", fmt_f64(*ratio));
        }
        outputs.add_json("ratios.json", &a.ratios);
    } else {
        let r = run(&wl, &cl, flags, seed).map_err(sim_err)?;
        outputs.add_json("report.json", &r);
        outputs.add("gantt.csv", gantt_csv(&emit_gantt(&r)));
        outputs.add("samples_saved.csv", r.samples_saved_csv());
        println!("{}", summary_line(&r));
    }
    outputs.write(out)
}

fn solve(inst: &SchedInstance, method: Method) -> Result<SchedulePlan, SchedError> {
    match method {
        Method::Exact => solve_exact(inst),
        Method::Sjf => solve_sjf(inst),
        Method::Oracle => {
            let r = brute_force_oracle(inst)?;
            let starts: Vec<(u32, f64)> = inst
                .tasks
                .iter()
                .zip(&r.starts_us)
                .map(|(t, &s)| (t.task_id, to_secs(s)))
                .collect();
            let mut plan = plan_from_starts(inst, &starts)?;
            plan.optimal = true;
            Ok(plan)
        }
    }
}

pub fn schedule(instance: &Path, method: Method, out: Option<&Path>) -> Result<(), CliError> {
    let inst: SchedInstance = read_json(instance)?;
    inst.validate().map_err(CliError::input)?;
    let plan = solve(&inst, method).map_err(sched_err)?;
    let reqs: Vec<(u32, u32)> = inst
        .tasks
        .iter()
        .map(|t| (t.task_id, t.gpus))
        .chain(
            inst.pinned
                .iter()
                .map(|p| (p.task_id, p.gpu_ids.len() as u32)),
        )
        .collect();
    check_plan(&plan, inst.gpus, &reqs).map_err(|e| CliError::Invariant(e.to_string()))?;
    let csv = plan.to_csv();
    print!("{csv}");
    println!(
        "makespan {} optimal {}",
        fmt_f64(plan.makespan),
        plan.optimal
    );
    if let Some(dir) = out {
        let method_name = match method {
            Method::Exact => "exact",
            Method::Sjf => "sjf",
            Method::Oracle => "oracle",
        };
        let mut outputs = OutputSet::new("schedule", &(method_name, &inst), None);
        outputs.add_json("plan.json", &plan);
        outputs.add("plan.csv", csv);
        outputs.write(dir)?;
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct DetectorArgs {
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Points in each slope window.
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long, default_value_t = 0.001)]
    pub tau_slope: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau_gap: f64,
    #[arg(long, default_value_t = 2)]
    pub patience_div: u32,
    #[arg(long, default_value_t = 2)]
    pub patience_ovf: u32,
}

impl DetectorArgs {
    fn config(&self) -> Result<DetectorConfig, CliError> {
        let cfg = DetectorConfig {
            alpha: self.alpha,
            window: self.window,
            tau_slope: self.tau_slope,
            tau_gap: self.tau_gap,
            patience_div: self.patience_div,
            patience_ovf: self.patience_ovf,
            ..DetectorConfig::default()
        };
        cfg.validate().map_err(CliError::input)?;
        Ok(cfg)
    }
}

pub fn detect(trace: &Path, args: &DetectorArgs, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = args.config()?;
    let traj = read_trajectory(trace, cfg.alpha)?;
    let points = run_detector(&traj, &cfg);
    let mut csv =
        String::from("step,ema_train,val,cnt_div,cnt_ovf,decision,reason,checkpoint_step\n");
    for p in &points {
        let (decision, reason, ckpt) = match p.decision {
            ExitDecision::Continue => ("continue", String::new(), String::new()),
            ExitDecision::Exit {
                reason,
                checkpoint_step,
            } => (
                "exit",
                reason.as_str().to_string(),
                checkpoint_step.map_or(String::new(), |s| s.to_string()),
            ),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{decision},{reason},{ckpt}\n",
            p.step,
            fmt_f64(p.ema_train),
            fmt_f64(p.val),
            p.cnt_div,
            p.cnt_ovf
        ));
    }
    print!("{csv}");
    if let Some(dir) = out {
        let mut outputs = OutputSet::new("detect", &(args, &traj), None);
        outputs.add("decisions.csv", csv);
        outputs.write(dir)?;
    }
    Ok(())
}

pub fn analyze_warmup(
    traces: &Path,
    fractions: &[f64],
    alpha: f64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Input(format!(
            "warmup fraction {f} outside (0, 1]"
        )));
    }
    let entries =
        fs::read_dir(traces).map_err(|e| CliError::Input(format!("{}: {e}", traces.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no .csv traces found",
            traces.display()
        )));
    }
    let mut runs = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let trajectory = read_trajectory(p, alpha)?;
        let total_steps = trajectory.train.last().map_or(0, |s| s.0);
        runs.push(RunOutcome {
            job_id: i as u32,
            total_steps,
            trajectory,
        });
    }
    let rel = warmup_reliability(&runs, fractions);
    let mut csv = String::from("warmup_frac,rho,top_quartile_coverage,best_in_top_quartile\n");
    for &f in fractions {
        match rel.metrics.iter().find(|m| m.warmup_frac == f) {
            Some(m) => csv.push_str(&format!(
                "{},{},{},{}\n",
                fmt_f64(f),
                m.rho.map_or(String::new(), fmt_f64),
                fmt_f64(m.top_quartile_coverage),
                m.best_in_top_quartile
            )),
            None => csv.push_str(&format!("{},,,skipped\n", fmt_f64(f))),
        }
    }
    print!("{csv}");
    if let Some(dir) = out {
        let names: Vec<String> = paths
            .iter()
            .map(|p| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        let trajs: Vec<&LossTrajectory> = runs.iter().map(|r| &r.trajectory).collect();
        let mut outputs = OutputSet::new("analyze-warmup", &(fractions, alpha, names, trajs), None);
        outputs.add("warmup_reliability.csv", csv);
        outputs.write(dir)?;
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct GemmArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random layer specs.
    #[arg(long, default_value_t = 200)]
    pub specs: usize,
    /// Fixed adapter count per spec; 2..=5 when omitted.
    #[arg(long)]
    pub adapters: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,5,8")]
    pub tokens: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub d_in: usize,
    #[arg(long, default_value_t = 64)]
    pub d_out: usize,
    /// Finite-difference coordinates sampled per tensor; 0 checks every one.
    #[arg(long, default_value_t = 16)]
    pub fd_sample: usize,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Serialize)]
struct GemmReport {
    specs: usize,
    max_forward_dev: f64,
    max_grad_dev: f64,
    padding_mismatches: usize,
    forward_tol: f64,
    grad_tol: f64,
    flops: loratune::lora_math::FlopReport,
}

pub fn gemm_check(args: &GemmArgs, out: Option<&Path>) -> Result<(), CliError> {
    if args.specs == 0 || args.adapters == Some(0) {
        return Err(CliError::Input(
            "--specs and --adapters must be >= 1".into(),
        ));
    }
    let defaults = CheckPlan::default();
    let plan = CheckPlan {
        seed: args.seed,
        specs: args.specs,
        d_in: args.d_in,
        d_out: args.d_out,
        ranks: args.ranks.clone(),
        tokens: args.tokens.clone(),
        adapters: args.adapters.map_or(defaults.adapters, |n| n..=n),
        fd_step: defaults.fd_step,
        coverage_sample: (args.fd_sample > 0).then_some(args.fd_sample),
    };
    let check = check_random_specs(&plan).map_err(CliError::input)?;
    let n = args.adapters.unwrap_or(args.ranks.len());
    let tok: Vec<usize> = (0..n).map(|i| args.tokens[i % args.tokens.len()]).collect();
    let rk: Vec<usize> = (0..n).map(|i| args.ranks[i % args.ranks.len()]).collect();
    let report = GemmReport {
        specs: check.specs,
        max_forward_dev: check.max_forward_dev,
        max_grad_dev: check.max_grad_dev,
        padding_mismatches: check.padding_mismatches,
        forward_tol: FORWARD_TOL,
        grad_tol: GRAD_TOL,
        flops: flop_accounting(&tok, &rk, args.d_in, args.d_out),
    };
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    } else {
        println!("specs {}", report.specs);
        println!(
            "max_forward_dev {:e} (tol {:e})",
            report.max_forward_dev, FORWARD_TOL
        );
        println!(
            "max_grad_dev {:e} (tol {:e})",
            report.max_grad_dev, GRAD_TOL
        );
        println!("padding_mismatches {}", report.padding_mismatches);
        println!(
            "flops base {} useful_lora {} wide_lora {} waste_ratio {}",
            report.flops.base_flops,
            report.flops.useful_lora_flops,
            report.flops.wide_lora_flops,
            fmt_f64(report.flops.waste_ratio)
        );
    }
    if let Some(dir) = out {
        let mut outputs = OutputSet::new("gemm-check", args, Some(args.seed));
        outputs.add_json("gemm_check.json", &report);
        outputs.write(dir)?;
    }
    if report.max_forward_dev > FORWARD_TOL
        || report.max_grad_dev > GRAD_TOL
        || report.padding_mismatches > 0
    {
        return Err(CliError::Invariant(
            "grouped math deviates from its oracles beyond tolerance".into(),
        ));
    }
    Ok(())
}
