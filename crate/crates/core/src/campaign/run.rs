use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::results::group_rows;
use super::{
    aggregate, classify, read_results, write_results, CampaignConfig, CampaignError,
    CampaignReport, FaultResult, Metadata, ResultRow, RunOutcome,
};
use crate::cnn::{
    load_idx, load_model, reference_infer, CnnError, CompiledModel, Model, Tensor,
};
use crate::faults::{make_hook, read_fault_list, FaultSpec};
use crate::isa::RegisterId;
use crate::simt::{DeviceConfig, KernelStats, SimError};

/// Fault-free outputs for the selected images.
#[derive(Debug, Clone, PartialEq)]
pub struct Golden {
    pub vectors: Vec<Tensor>,
    /// Statistics folded over all images.
    pub stats: KernelStats,
    /// Per image, warp instructions issued by each kernel.
    pub kernel_instructions: Vec<Vec<u64>>,
}

impl Golden {
    /// Largest single-launch instruction count over all images.
    pub fn max_kernel_instructions(&self) -> u64 {
        self.kernel_instructions
            .iter()
            .flatten()
            .copied()
            .max()
            .unwrap_or(0)
    }

    pub fn top1(&self) -> Vec<usize> {
        self.vectors.iter().map(Tensor::argmax).collect()
    }

    pub fn to_json(&self, model: &str, labels: &[u8]) -> String {
        #[derive(Serialize)]
        struct Image<'a> {
            index: usize,
            label: Option<u8>,
            top1: usize,
            probs: &'a [f32],
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            model: &'a str,
            instructions_executed: u64,
            max_kernel_instructions: u64,
            reg_write_counts: &'a [u64],
            images: Vec<Image<'a>>,
        }
        let doc = Doc {
            model,
            instructions_executed: self.stats.instructions_executed,
            max_kernel_instructions: self.max_kernel_instructions(),
            reg_write_counts: &self.stats.reg_write_counts,
            images: self
                .vectors
                .iter()
                .enumerate()
                .map(|(i, v)| Image {
                    index: i,
                    label: labels.get(i).copied(),
                    top1: v.argmax(),
                    probs: &v.data,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("golden serializes") + "\n"
    }
}

fn golden_with(
    compiled: &CompiledModel,
    model: &Model,
    images: &[Tensor],
    device: &DeviceConfig,
) -> Result<Golden, CampaignError> {
    let mut stats = KernelStats::new(device.regs_per_thread);
    let mut vectors = Vec::with_capacity(images.len());
    let mut kernel_instructions = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let inf = compiled.infer(img, device, None).map_err(|e| match e {
            CnnError::Sim(SimError::Trap(trap)) => CampaignError::GoldenTrap { image: i, trap },
            e => CampaignError::Cnn(e),
        })?;
        let reference = reference_infer(model, img)?;
        if reference.bits() != inf.probs.bits() {
            return Err(CampaignError::GoldenMismatch { image: i });
        }
        stats.accumulate(&inf.stats);
        kernel_instructions.push(inf.kernel_instructions);
        vectors.push(inf.probs);
    }
    Ok(Golden {
        vectors,
        stats,
        kernel_instructions,
    })
}

/// Fault-free inference of every image, cross-checked bit for bit against
/// the reference implementation. The device's memory is sized to the model.
pub fn run_golden(
    model: &Model,
    images: &[Tensor],
    device: &DeviceConfig,
) -> Result<Golden, CampaignError> {
    let compiled = CompiledModel::compile(model)?;
    let device = sized(device, &compiled)?;
    golden_with(&compiled, model, images, &device)
}

fn sized(device: &DeviceConfig, compiled: &CompiledModel) -> Result<DeviceConfig, CampaignError> {
    let need = compiled.memory_words();
    if device.global_mem_words != 0 && device.global_mem_words < need {
        return Err(CampaignError::Config(format!(
            "device memory of {} words is smaller than the {need} the model needs",
            device.global_mem_words
        )));
    }
    Ok(DeviceConfig {
        global_mem_words: device.global_mem_words.max(need),
        ..*device
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProfileRow {
    #[serde(serialize_with = "register_name")]
    pub register: RegisterId,
    pub writes: u64,
}

fn register_name<S: serde::Serializer>(r: &RegisterId, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(r)
}

/// Destination-register write counts over a golden run, most written
/// first (ties by register index); registers never written are omitted.
pub fn profile_registers(
    model: &Model,
    images: &[Tensor],
    device: &DeviceConfig,
) -> Result<Vec<ProfileRow>, CampaignError> {
    let golden = run_golden(model, images, device)?;
    let mut rows: Vec<ProfileRow> = golden
        .stats
        .reg_write_counts
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0)
        .filter_map(|(i, n)| {
            Some(ProfileRow {
                register: RegisterId::new(i as u8)?,
                writes: *n,
            })
        })
        .collect();
    rows.sort_by(|a, b| b.writes.cmp(&a.writes).then(a.register.cmp(&b.register)));
    Ok(rows)
}

/// Runs one fault over every image on fresh device memory, with one hook
/// instance per inference; returns the per-fault result and its CSV rows.
pub fn run_fault(
    compiled: &CompiledModel,
    images: &[Tensor],
    golden: &Golden,
    device: &DeviceConfig,
    spec: &FaultSpec,
) -> (FaultResult, Vec<ResultRow>) {
    let mut result = FaultResult {
        fault_id: spec.id.clone(),
        outcomes: Vec::with_capacity(images.len()),
        corrupted_writes: 0,
        vectors: Vec::with_capacity(images.len()),
    };
    let mut rows = Vec::with_capacity(images.len());
    for (i, (img, gold)) in images.iter().zip(&golden.vectors).enumerate() {
        let mut hook = make_hook(spec);
        let run = compiled.infer(img, device, Some(&mut hook));
        let (outcome, vector) = match run {
            Ok(inf) => match classify(&gold.data, Ok(&inf.probs.data)) {
                Ok(o) => (RunOutcome::Classified(o), Some(inf.probs.data)),
                Err(e) => {
                    log::warn!("fault {} image {i}: {e}", spec.id);
                    (RunOutcome::ToolError, None)
                }
            },
            Err(CnnError::Sim(SimError::Trap(t))) => (
                RunOutcome::Classified(
                    classify(&gold.data, Err(t.kind)).expect("traps always classify"),
                ),
                None,
            ),
            Err(e) => {
                log::debug!("fault {} image {i}: tool error: {e}", spec.id);
                (RunOutcome::ToolError, None)
            }
        };
        let trap_kind = match outcome {
            RunOutcome::Classified(o) => o.trap_kind().map(|k| k.name().to_string()),
            RunOutcome::ToolError => None,
        };
        rows.push(ResultRow {
            fault_id: spec.id.clone(),
            image_index: i,
            outcome: outcome.name().to_string(),
            trap_kind,
            corrupted_writes: hook.corrupted_writes(),
            golden_top1: gold.argmax(),
            faulty_top1: vector.as_deref().map(crate::cnn::argmax),
        });
        result.outcomes.push(outcome);
        result.corrupted_writes += hook.corrupted_writes();
        result.vectors.push(vector);
    }
    (result, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Overrides the config's parallelism.
    pub jobs: Option<usize>,
    /// Keep complete fault results already in `results.csv`.
    pub resume: bool,
    /// Process at most this many not-yet-done faults, then stop.
    pub stop_after: Option<usize>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CampaignError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CampaignError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CampaignError::io(path, e))
}

fn ordered_rows(faults: &[FaultSpec], done: &HashMap<String, Vec<ResultRow>>) -> Vec<ResultRow> {
    faults
        .iter()
        .filter_map(|f| done.get(&f.id))
        .flatten()
        .cloned()
        .collect()
}

fn csv_bytes(rows: &[ResultRow]) -> Result<Vec<u8>, CampaignError> {
    let mut buf = Vec::new();
    write_results(&mut buf, rows)?;
    if rows.is_empty() {
        // the csv writer only emits a header together with a record
        buf.extend_from_slice(
            b"fault_id,image_index,outcome,trap_kind,corrupted_writes,golden_top1,faulty_top1\n",
        );
    }
    Ok(buf)
}

/// Runs a whole campaign and writes `golden.json`, `results.csv` and
/// `report.json` into the output directory.
///
/// Results are appended to `results.csv` as faults finish, in fault-list
/// order; the final file and report do not depend on the job count.
pub fn run_campaign(
    config: &CampaignConfig,
    opts: RunOptions,
) -> Result<CampaignReport, CampaignError> {
    let model = load_model(&config.model)?;
    let dataset = load_idx(&config.images, &config.labels)?;
    if config.image_count > dataset.len() {
        return Err(CampaignError::Config(format!(
            "image_count {} exceeds the {} images in the dataset",
            config.image_count,
            dataset.len()
        )));
    }
    let images = &dataset.images[..config.image_count];
    let fault_bytes =
        std::fs::read(&config.faults).map_err(|e| CampaignError::io(&config.faults, e))?;
    let faults = read_fault_list(BufReader::new(&fault_bytes[..]))?;
    let digest = hex::encode(Sha256::digest(&fault_bytes));

    let compiled = CompiledModel::compile(&model)?;
    let settings = config.device;
    let probe = settings.device(settings.global_mem_words.unwrap_or(0), u64::MAX);
    let probe = sized(&probe, &compiled)?;
    probe
        .validate()
        .map_err(|e| CampaignError::Config(e.to_string()))?;
    let golden = golden_with(&compiled, &model, images, &probe)?;
    let budget = config
        .instr_budget
        .unwrap_or_else(|| golden.max_kernel_instructions().saturating_mul(20).max(1));
    let device = DeviceConfig {
        instr_budget: budget,
        ..probe
    };
    for f in &faults {
        f.validate(&device)
            .map_err(|e| CampaignError::InvalidFault(e.to_string()))?;
    }

    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| CampaignError::io(out, e))?;
    write_atomic(
        &out.join("golden.json"),
        golden.to_json(&model.name, &dataset.labels).as_bytes(),
    )?;

    let results_path = out.join("results.csv");
    let mut done: HashMap<String, Vec<ResultRow>> = HashMap::new();
    if opts.resume && results_path.exists() {
        let file = File::open(&results_path).map_err(|e| CampaignError::io(&results_path, e))?;
        let mut by_fault: BTreeMap<String, Vec<ResultRow>> = BTreeMap::new();
        for r in read_results(BufReader::new(file))? {
            by_fault.entry(r.fault_id.clone()).or_default().push(r);
        }
        let known: HashMap<&str, ()> = faults.iter().map(|f| (f.id.as_str(), ())).collect();
        for (id, mut rows) in by_fault {
            rows.sort_by_key(|r| r.image_index);
            let complete = rows.len() == images.len()
                && rows.iter().enumerate().all(|(i, r)| r.image_index == i);
            if complete && known.contains_key(id.as_str()) {
                done.insert(id, rows);
            }
        }
        log::info!("resuming: {} faults already complete", done.len());
    }
    write_atomic(&results_path, &csv_bytes(&ordered_rows(&faults, &done))?)?;

    let jobs = opts.jobs.unwrap_or(config.parallelism).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CampaignError::Config(format!("thread pool: {e}")))?;
    let pending: Vec<&FaultSpec> = faults
        .iter()
        .filter(|f| !done.contains_key(&f.id))
        .take(opts.stop_after.unwrap_or(usize::MAX))
        .collect();
    let mut appender = csv::WriterBuilder::new().has_headers(false).from_writer(
        OpenOptions::new()
            .append(true)
            .open(&results_path)
            .map_err(|e| CampaignError::io(&results_path, e))?,
    );
    let total = pending.len();
    let mut finished = 0usize;
    for chunk in pending.chunks(jobs * 4) {
        let runs: Vec<(FaultResult, Vec<ResultRow>)> = pool.install(|| {
            chunk
                .par_iter()
                .map(|f| run_fault(&compiled, images, &golden, &device, f))
                .collect()
        });
        for (res, rows) in runs {
            for r in &rows {
                appender
                    .serialize(r)
                    .map_err(|e| CampaignError::Results(e.to_string()))?;
            }
            done.insert(res.fault_id, rows);
        }
        appender
            .flush()
            .map_err(|e| CampaignError::io(&results_path, e))?;
        finished += chunk.len();
        log::info!("{finished}/{total} faults");
    }
    drop(appender);

    let rows = ordered_rows(&faults, &done);
    write_atomic(&results_path, &csv_bytes(&rows)?)?;
    let mut report = aggregate(&group_rows(&rows)?)?;
    report.metadata = Some(Metadata {
        seed: config.seed,
        model: model.name.clone(),
        device,
        image_count: images.len(),
        fault_count: faults.len(),
        fault_list_sha256: digest,
    });
    let mut f = File::create(out.join("report.json"))
        .map_err(|e| CampaignError::io(out.join("report.json"), e))?;
    f.write_all(report.to_json().as_bytes())
        .map_err(|e| CampaignError::io(out.join("report.json"), e))?;
    Ok(report)
}
