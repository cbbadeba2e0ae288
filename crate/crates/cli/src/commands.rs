use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use hetgt::graph::{generate_synthetic, write_dataset, FeatureFormat, SyntheticSpec};
use hetgt::model::{write_checkpoint, Aggregator, ModelKind, ModelSpec};
use hetgt::suite::{run_suite, SuiteOptions, GRADCHECK_THRESHOLD};
use hetgt::tensor::Fault;
use hetgt::training::{multi_run, MultiRun, Summary};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::failure::{ExitCode, Failure};

pub const PAPER_DEPTHS: [usize; 4] = [2, 5, 10, 20];
pub const ABLATION_DEPTH: usize = 5;

/// One grid cell of a sweep or ablation.
#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub model: String,
    pub depth: usize,
    pub aggregator: String,
    pub runs: usize,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub micro_f1_mean: f64,
    pub micro_f1_std: f64,
    pub ms_per_epoch: f64,
    pub diverged_runs: usize,
}

impl TableRow {
    fn new(m: &MultiRun) -> Self {
        let s = &m.summary;
        Self {
            model: s.model.to_string(),
            depth: s.depth,
            aggregator: s.aggregator.to_string(),
            runs: s.runs,
            macro_f1_mean: s.macro_f1.mean,
            macro_f1_std: s.macro_f1.std,
            micro_f1_mean: s.micro_f1.mean,
            micro_f1_std: s.micro_f1.std,
            ms_per_epoch: m.ms_per_epoch,
            diverged_runs: s.diverged_runs,
        }
    }
}

#[derive(Debug, Serialize)]
struct ResultsTable<'a> {
    rows: &'a [TableRow],
}

#[derive(Debug, Serialize)]
struct Timing {
    ms_per_epoch: f64,
    per_run: Vec<f64>,
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn write_table(dir: &Path, stem: &str, rows: &[TableRow]) -> Result<(), Failure> {
    write_json(&dir.join(format!("{stem}.json")), &ResultsTable { rows })?;
    let path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::io(&path, e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Failure::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))
}

fn print_row(r: &TableRow) {
    println!(
        "{:<11} depth {:>2}  {:<12}  macro-F1 {:.4} ± {:.4}  micro-F1 {:.4} ± {:.4}  {:.1} ms/epoch{}",
        r.model,
        r.depth,
        r.aggregator,
        r.macro_f1_mean,
        r.macro_f1_std,
        r.micro_f1_mean,
        r.micro_f1_std,
        r.ms_per_epoch,
        if r.diverged_runs > 0 {
            format!("  ({} diverged)", r.diverged_runs)
        } else {
            String::new()
        }
    );
}

/// Turns diverged runs into a numerical failure once results are on disk.
fn divergence_check(summaries: &[&Summary]) -> Result<(), Failure> {
    let diverged: usize = summaries.iter().map(|s| s.diverged_runs).sum();
    if diverged > 0 {
        return Err(Failure {
            code: ExitCode::Numerical,
            message: format!("{diverged} run(s) diverged; partial results were written"),
        });
    }
    Ok(())
}

pub fn train(config: &ExperimentConfig) -> Result<(), Failure> {
    let graph = config.graph()?;
    let result = multi_run(&config.model, &graph, &config.train, config.n_runs)?;

    let out = &config.out;
    create_dir(out)?;
    let runs_path = out.join("runs.jsonl");
    let file = File::create(&runs_path).map_err(|e| Failure::io(&runs_path, e))?;
    let mut w = BufWriter::new(file);
    for r in &result.runs {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(w, "{line}").map_err(|e| Failure::io(&runs_path, e))?;
    }
    w.flush().map_err(|e| Failure::io(&runs_path, e))?;
    write_json(&out.join("summary.json"), &result.summary)?;
    write_json(
        &out.join("timing.json"),
        &Timing {
            ms_per_epoch: result.ms_per_epoch,
            per_run: result.runs.iter().map(|r| r.ms_per_epoch).collect(),
        },
    )?;
    let best = &result.runs[result.best_run];
    let metadata: BTreeMap<String, String> = [
        (
            "model".to_string(),
            serde_json::to_string(&config.model).expect("serializable"),
        ),
        ("seed".to_string(), best.seed.to_string()),
        ("best_epoch".to_string(), best.best_epoch.to_string()),
    ]
    .into_iter()
    .collect();
    write_checkpoint(out.join("checkpoint.safetensors"), &result.best_params, &metadata)?;

    print_row(&TableRow::new(&result));
    println!("wrote {}", out.display());
    divergence_check(&[&result.summary])
}

pub fn depth_sweep(config: &ExperimentConfig, depths: &[usize]) -> Result<(), Failure> {
    if depths.is_empty() {
        return Err(Failure::config("depth list is empty"));
    }
    let specs: Vec<ModelSpec> = depths
        .iter()
        .map(|&d| ModelSpec {
            depth: d,
            ..config.model.clone()
        })
        .collect();
    grid(config, &specs, "depth_sweep")
}

/// Aggregator variants at a fixed depth for a tree model: semantic, mean
/// and layer-wise weighted sum, plus the summation-only HetGTAN_ns for the
/// attention family.
pub fn ablation(config: &ExperimentConfig, depth: usize) -> Result<(), Failure> {
    let kind = config.model.kind;
    if !kind.is_tree() {
        return Err(Failure::config(format!(
            "ablation needs HetGTCN or HetGTAN, got {kind}"
        )));
    }
    let base_kind = if kind == ModelKind::HetGtanNs {
        ModelKind::HetGtan
    } else {
        kind
    };
    let base = ModelSpec {
        kind: base_kind,
        depth,
        ..config.model.clone()
    };
    let mut specs: Vec<ModelSpec> = [Aggregator::Semantic, Aggregator::Mean, Aggregator::WeightedSum]
        .into_iter()
        .map(|a| base.clone().with_aggregator(a))
        .collect();
    if base_kind == ModelKind::HetGtan {
        specs.push(ModelSpec {
            kind: ModelKind::HetGtanNs,
            aggregator: Aggregator::None,
            ..base.clone()
        });
    }
    grid(config, &specs, "ablation")
}

fn grid(config: &ExperimentConfig, specs: &[ModelSpec], stem: &str) -> Result<(), Failure> {
    for s in specs {
        s.validate()?;
    }
    let graph = config.graph()?;
    let mut results = Vec::with_capacity(specs.len());
    for spec in specs {
        let r = multi_run(spec, &graph, &config.train, config.n_runs)?;
        print_row(&TableRow::new(&r));
        results.push(r);
    }
    let rows: Vec<TableRow> = results.iter().map(TableRow::new).collect();
    create_dir(&config.out)?;
    write_table(&config.out, stem, &rows)?;
    println!("wrote {}", config.out.display());
    divergence_check(&results.iter().map(|r| &r.summary).collect::<Vec<_>>())
}

pub fn gen_synthetic(spec: &SyntheticSpec, out: &Path, format: FeatureFormat) -> Result<(), Failure> {
    let graph = generate_synthetic(spec)?;
    write_dataset(&graph, out, format)?;
    println!(
        "wrote {} nodes of {} types to {}",
        graph.num_nodes(),
        graph.schema().node_types().len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckReport<'a> {
    threshold: f64,
    cases: &'a [hetgt::suite::SuiteCase],
}

pub fn gradcheck(seed: u64, fault: bool, out: Option<&Path>) -> Result<(), Failure> {
    let opts = SuiteOptions {
        seed,
        fault: fault.then_some(Fault::ScaleMatmulGrad(1.5)),
    };
    let cases = run_suite(&opts)?;
    for c in &cases {
        println!(
            "{}  {:.3e}  {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.max_rel_error,
            c.name
        );
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(
            &dir.join("gradcheck.json"),
            &GradcheckReport {
                threshold: GRADCHECK_THRESHOLD,
                cases: &cases,
            },
        )?;
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: ExitCode::CheckFailed,
            message: format!(
                "{failed} of {} gradient checks exceed {GRADCHECK_THRESHOLD:e}",
                cases.len()
            ),
        });
    }
    println!("all {} gradient checks within {GRADCHECK_THRESHOLD:e}", cases.len());
    Ok(())
}
