//! Artifact DAG, build planning and stage execution.

pub mod artifact;
pub mod config;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::distill::{finetune, LossCurves, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    self, evaluate_accuracy, sampling_seed, MetricsRow, SweepBases, SweepConfig, STREAM_ICL, STREAM_OPTIMIZER,
    STREAM_STUDENT_EVAL, STREAM_TEST, STREAM_TRAIN, STUDENT_EVAL_TAU,
};
use crate::gradstore::{compute_downstream_grad, GradientArtifact};
use crate::model::{init_model, MaskedSequence, ModelConfig, TransformerModel};
use crate::sampler::{generate_traces, derive_seed, PenaltyContext, SamplerKind, SamplerSpec, TraceRecord};
use crate::tasks::{build_icl_prompt, read_jsonl, write_jsonl, DatasetSplits, Split, TaskInstance, TraceFileRecord};

pub use artifact::{ArtifactName, Lambda};
pub use config::ExperimentConfig;
pub use store::{ArtifactRecord, Store, StoreLock};

pub const STREAM_HOLDOUT: u64 = 5;
pub const STREAM_GATE: u64 = 6;

const TRACES_FILE: &str = "traces.jsonl";
const CURVES_FILE: &str = "loss_curves.csv";
const METRICS_FILE: &str = "metrics.csv";

/// Ordered build steps; empty when everything requested is cached.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub steps: Vec<ArtifactName>,
}

impl Plan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.steps.iter().map(ToString::to_string).collect()
    }
}

pub struct Pipeline {
    pub store: Store,
    pub config: ExperimentConfig,
    config_hash: String,
    splits: DatasetSplits,
}

impl Pipeline {
    pub fn new(store: Store, config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let splits = DatasetSplits::build(&config.task)?;
        Ok(Self {
            config_hash: artifact_config_hash(&config),
            store,
            config,
            splits,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn splits(&self) -> &DatasetSplits {
        &self.splits
    }

    /// Topologically ordered steps covering exactly the missing or stale part
    /// of `name`'s dependency closure.
    pub fn resolve(&self, name: &ArtifactName) -> Result<Plan> {
        let mut steps = Vec::new();
        let mut visiting = Vec::new();
        let mut memo = HashMap::new();
        self.visit(name, &mut visiting, &mut memo, &mut steps)?;
        Ok(Plan { steps })
    }

    fn visit(
        &self,
        name: &ArtifactName,
        visiting: &mut Vec<String>,
        memo: &mut HashMap<String, bool>,
        steps: &mut Vec<ArtifactName>,
    ) -> Result<bool> {
        let key = name.to_string();
        if visiting.contains(&key) {
            return Err(Error::Internal(format!("dependency cycle through `{key}`")));
        }
        if let Some(&rebuild) = memo.get(&key) {
            return Ok(rebuild);
        }
        visiting.push(key.clone());
        let mut dep_rebuilt = false;
        for dep in name.dependencies() {
            dep_rebuilt |= self.visit(&dep, visiting, memo, steps)?;
        }
        visiting.pop();
        let rebuild = dep_rebuilt || !self.is_fresh(name)?;
        if rebuild {
            steps.push(*name);
        }
        memo.insert(key, rebuild);
        Ok(rebuild)
    }

    /// Present, built under the current config, payload intact, and built
    /// from the dependency payloads currently in the store.
    pub fn is_fresh(&self, name: &ArtifactName) -> Result<bool> {
        let Some(rec) = self.store.record(name)? else {
            return Ok(false);
        };
        if rec.config_hash != self.config_hash || !self.store.verify(name)? {
            return Ok(false);
        }
        for dep in name.dependencies() {
            match self.store.record(&dep)? {
                Some(d) if rec.input_hashes.get(&dep.to_string()) == Some(&d.payload_hash) => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Resolves and runs the plan for `name`; returns the steps that ran.
    pub fn build(&self, name: &ArtifactName, mut progress: impl FnMut(&ArtifactName)) -> Result<Plan> {
        let plan = self.resolve(name)?;
        if plan.is_empty() {
            return Ok(plan);
        }
        let lock = self.store.lock()?;
        for step in &plan.steps {
            progress(step);
            self.run_stage(&lock, step)?;
        }
        Ok(plan)
    }

    /// Runs one stage whose dependencies are all present.
    pub fn run_stage(&self, lock: &StoreLock, name: &ArtifactName) -> Result<ArtifactRecord> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        let mut inputs = BTreeMap::new();
        for dep in name.dependencies() {
            let rec = self.store.require(&dep).map_err(wrap)?;
            inputs.insert(dep.to_string(), rec.payload_hash);
        }
        let manifest = ArtifactRecord::manifest_hash(&self.config_hash, &inputs);
        self.store
            .commit(lock, name, &self.config_hash, inputs, |dir| self.execute(name, dir, &manifest))
            .map_err(wrap)
    }

    fn execute(&self, name: &ArtifactName, out: &Path, manifest: &str) -> Result<()> {
        let cfg = &self.config;
        match *name {
            ArtifactName::Teacher => {
                let (teacher, curves, accuracy, rounds) = self.train_teacher()?;
                teacher.save(out, "teacher")?;
                write_text(&out.join(CURVES_FILE), &curves.to_csv())?;
                let gate = serde_json::json!({ "test_accuracy": accuracy, "rounds": rounds, "gate": cfg.teacher_training.gate });
                write_text(&out.join("gate.json"), &serde_json::to_string_pretty(&gate)?)
            }
            ArtifactName::Proxy => self.pretrain_base(&cfg.proxy, "proxy", out),
            ArtifactName::StudentBase => self.pretrain_base(&cfg.student, "student_base", out),
            ArtifactName::TeacherTraces { lambda, split } => {
                let teacher = self.load_model(&ArtifactName::Teacher)?;
                let stream = match split {
                    Split::Train => STREAM_TRAIN,
                    Split::Holdout => STREAM_HOLDOUT,
                    Split::Test => STREAM_TEST,
                };
                let seed = sampling_seed(cfg.seed, stream);
                let s = &cfg.sampler;
                let (spec, ctx) = if lambda.is_zero() {
                    (SamplerSpec::temperature(s.tau, s.max_tokens, seed), None)
                } else {
                    let ctx = self.penalty_context()?;
                    let spec = SamplerSpec::penalized(SamplerKind::Antidistill, s.tau, lambda.value(), s.epsilon, s.max_tokens, seed);
                    (spec, Some(ctx))
                };
                let instances = self.splits.split(split);
                let prompts: Vec<_> = instances.iter().map(|i| i.prompt_tokens.clone()).collect();
                let traces = generate_traces(&teacher, &spec, ctx.as_ref(), &prompts)?;
                write_traces(&out.join(TRACES_FILE), traces, instances, split, &name.to_string()).map(drop)
            }
            ArtifactName::StudentGrad => {
                let proxy = self.load_model(&ArtifactName::Proxy)?;
                let source = ArtifactName::teacher_traces(0.0, Split::Holdout)?;
                let holdout = self.load_sequences(&source)?;
                let (art, loss) = compute_downstream_grad(&proxy, &holdout, &source.to_string())?;
                art.save(out, &proxy.digest(), loss, holdout.len())
            }
            ArtifactName::Student { lambda } => {
                let base = self.load_model(&ArtifactName::StudentBase)?;
                let traces = self.load_sequences(&ArtifactName::TeacherTraces { lambda, split: Split::Train })?;
                let holdout = self.load_sequences(&ArtifactName::teacher_traces(0.0, Split::Holdout)?)?;
                let train = TrainConfig {
                    optimizer_seed: sampling_seed(cfg.seed, STREAM_OPTIMIZER),
                    ..cfg.distill.clone()
                };
                let (student, curves) = finetune(&base, &traces, &holdout, &train)?;
                student.save(out, &name.to_string())?;
                write_text(&out.join(CURVES_FILE), &curves.to_csv())
            }
            ArtifactName::StudentBaseTest => {
                let base = self.load_model(&ArtifactName::StudentBase)?;
                let test = &self.splits.test;
                let exemplars = &self.splits.teacher_corpus;
                let k = cfg.icl_k;
                let mut prompts = Vec::with_capacity(test.len());
                for (i, inst) in test.iter().enumerate() {
                    let start = (i * k) % exemplars.len().max(1);
                    let chosen: Vec<TaskInstance> = exemplars.iter().cycle().skip(start).take(k).cloned().collect();
                    prompts.push(build_icl_prompt(inst, &chosen, k, base.config.max_seq_len)?);
                }
                let spec = SamplerSpec::temperature(STUDENT_EVAL_TAU, cfg.sampler.max_tokens, sampling_seed(cfg.seed, STREAM_ICL));
                let traces = generate_traces(&base, &spec, None, &prompts)?;
                write_traces(&out.join(TRACES_FILE), traces, test, Split::Test, &name.to_string()).map(drop)
            }
            ArtifactName::StudentTest { lambda } => {
                let student_name = ArtifactName::Student { lambda };
                let student = self.load_model(&student_name)?;
                let spec = SamplerSpec::temperature(STUDENT_EVAL_TAU, cfg.sampler.max_tokens, sampling_seed(cfg.seed, STREAM_STUDENT_EVAL));
                let test = &self.splits.test;
                let prompts: Vec<_> = test.iter().map(|i| i.prompt_tokens.clone()).collect();
                let traces = generate_traces(&student, &spec, None, &prompts)?;
                let student_records = write_traces(&out.join(TRACES_FILE), traces, test, Split::Test, &name.to_string())?;
                let teacher_records = self.load_traces(&ArtifactName::TeacherTraces { lambda, split: Split::Test })?;
                let base_records = self.load_traces(&ArtifactName::StudentBaseTest)?;
                let curves = std::fs::read_to_string(self.store.payload_path(&student_name, CURVES_FILE))
                    .map_err(|e| Error::io(&self.store.payload_path(&student_name, CURVES_FILE), e))?;
                let row = MetricsRow {
                    method: SamplerKind::Antidistill,
                    knob: lambda.value(),
                    seed: cfg.seed,
                    teacher_accuracy: accuracy_of(&teacher_records)?,
                    student_accuracy: accuracy_of(&student_records)?,
                    undistilled_accuracy: accuracy_of(&base_records)?,
                    final_holdout_loss: last_holdout_loss(&curves)?,
                    trace_artifact: ArtifactName::TeacherTraces { lambda, split: Split::Train }.to_string(),
                    manifest_hash: manifest.to_string(),
                };
                write_text(&out.join(METRICS_FILE), &eval::metrics_csv(&[row]))
            }
        }
    }

    fn train_teacher(&self) -> Result<(TransformerModel, LossCurves, f64, usize)> {
        let cfg = &self.config;
        let tt = &cfg.teacher_training;
        let corpus = gold_sequences(&self.splits.teacher_corpus);
        let mut model = init_model(&cfg.teacher)?;
        let mut all = LossCurves::default();
        let gate_spec = SamplerSpec::temperature(cfg.sampler.tau, cfg.sampler.max_tokens, sampling_seed(cfg.seed, STREAM_GATE));
        for round in 1..=tt.max_rounds.max(1) {
            let train = TrainConfig {
                optimizer_seed: derive_seed(tt.train.optimizer_seed, round as u64),
                ..tt.train.clone()
            };
            let (next, curves) = finetune(&model, &corpus, &[], &train)?;
            model = next;
            let offset = all.train_loss.last().map_or(0, |p| p.0);
            all.train_loss.extend(curves.train_loss.iter().map(|&(s, v)| (s + offset, v)));
            if round < tt.min_rounds {
                continue;
            }
            let accuracy = evaluate_accuracy(&model, &self.splits.test, &gate_spec, None)?;
            if accuracy >= tt.gate {
                return Ok((model, all, accuracy, round));
            }
            if round == tt.max_rounds.max(1) {
                return Err(Error::TrainingFailure {
                    step: offset + curves.train_loss.len(),
                    detail: format!("teacher test accuracy {accuracy:.3} below gate {} after {round} rounds", tt.gate),
                });
            }
        }
        unreachable!("loop returns on its last round")
    }

    fn pretrain_base(&self, model_cfg: &ModelConfig, file: &str, out: &Path) -> Result<()> {
        let cfg = &self.config;
        let n = cfg.base_examples.min(self.splits.teacher_corpus.len());
        let corpus = gold_sequences(&self.splits.teacher_corpus[..n]);
        let init = init_model(model_cfg)?;
        let train = TrainConfig {
            optimizer_seed: derive_seed(cfg.base_training.optimizer_seed, model_cfg.init_seed),
            ..cfg.base_training.clone()
        };
        let model = if n == 0 || cfg.base_training.learning_rate == 0.0 {
            init
        } else {
            finetune(&init, &corpus, &[], &train)?.0
        };
        model.save(out, file)?;
        if n > 0 {
            let curves = LossCurves {
                train_loss: vec![(0, model.mean_nll(&corpus)?)],
                holdout_loss: vec![],
            };
            write_text(&out.join(CURVES_FILE), &curves.to_csv())?;
        }
        Ok(())
    }

    fn checkpoint_file(name: &ArtifactName) -> String {
        match name {
            ArtifactName::Teacher => "teacher".into(),
            ArtifactName::Proxy => "proxy".into(),
            ArtifactName::StudentBase => "student_base".into(),
            other => other.to_string(),
        }
    }

    /// Loads a checkpoint artifact.
    pub fn load_model(&self, name: &ArtifactName) -> Result<TransformerModel> {
        self.store.require(name)?;
        TransformerModel::load(&self.store.dir(name), &Self::checkpoint_file(name))
    }

    pub fn load_gradient(&self) -> Result<GradientArtifact> {
        self.store.require(&ArtifactName::StudentGrad)?;
        GradientArtifact::load(&self.store.dir(&ArtifactName::StudentGrad))
    }

    pub fn penalty_context(&self) -> Result<PenaltyContext> {
        let proxy = self.load_model(&ArtifactName::Proxy)?;
        let grad = self.load_gradient()?;
        grad.check_proxy(&proxy)?;
        PenaltyContext::new(&proxy, &grad.g, self.config.sampler.epsilon, grad.g.digest())
    }

    pub fn load_traces(&self, name: &ArtifactName) -> Result<Vec<TraceFileRecord>> {
        self.store.require(name)?;
        read_jsonl(&self.store.payload_path(name, TRACES_FILE))
    }

    pub fn load_sequences(&self, name: &ArtifactName) -> Result<Vec<MaskedSequence>> {
        Ok(self
            .load_traces(name)?
            .iter()
            .map(|r| MaskedSequence::from_prompt_completion(&r.prompt_tokens, &r.trace_tokens))
            .collect())
    }

    pub fn load_metrics(&self, lambda: f64) -> Result<String> {
        let name = ArtifactName::student_test(lambda)?;
        self.store.require(&name)?;
        let path = self.store.payload_path(&name, METRICS_FILE);
        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let c = &self.config;
        SweepConfig {
            lambdas: c.sweep.lambdas.clone(),
            taus: c.sweep.taus.clone(),
            permutation_lambdas: c.sweep.permutation_lambdas.clone(),
            seeds: c.sweep.seeds.clone(),
            tau: c.sampler.tau,
            epsilon: c.sampler.epsilon,
            max_tokens: c.sampler.max_tokens,
            icl_k: c.icl_k,
            train: c.distill.clone(),
        }
    }

    /// Loads everything a trade-off sweep needs; missing artifacts are
    /// reported by name.
    pub fn sweep_inputs(&self) -> Result<SweepInputs> {
        Ok(SweepInputs {
            teacher: self.load_model(&ArtifactName::Teacher)?,
            student_base: self.load_model(&ArtifactName::StudentBase)?,
            penalty: self.penalty_context()?,
            holdout_traces: self.load_sequences(&ArtifactName::teacher_traces(0.0, Split::Holdout)?)?,
        })
    }

    pub fn run_sweep(&self, inputs: &SweepInputs, cfg: &SweepConfig) -> Result<Vec<MetricsRow>> {
        let mut rows = eval::tradeoff_sweep(&inputs.bases(&self.splits), cfg)?;
        for r in &mut rows {
            r.manifest_hash = self.config_hash.clone();
            r.trace_artifact = match r.method {
                SamplerKind::Temperature => format!("sweep:temperature={}:seed={}", r.knob, r.seed),
                kind => format!("sweep:{}={}:seed={}", kind.as_str(), r.knob, r.seed),
            };
        }
        Ok(rows)
    }
}

/// Owned sweep inputs loaded from the store.
pub struct SweepInputs {
    pub teacher: TransformerModel,
    pub student_base: TransformerModel,
    pub penalty: PenaltyContext,
    pub holdout_traces: Vec<MaskedSequence>,
}

impl SweepInputs {
    pub fn bases<'a>(&'a self, splits: &'a DatasetSplits) -> SweepBases<'a> {
        SweepBases {
            teacher: &self.teacher,
            student_base: &self.student_base,
            penalty: &self.penalty,
            train: &splits.train,
            test: &splits.test,
            exemplars: &splits.teacher_corpus,
            holdout_traces: &self.holdout_traces,
        }
    }
}

/// Config hash used for artifacts: the sweep grid does not affect any stored payload.
pub fn artifact_config_hash(config: &ExperimentConfig) -> String {
    let mut c = config.clone();
    c.sweep = ExperimentConfig::default().sweep;
    c.digest()
}

fn gold_sequences(instances: &[TaskInstance]) -> Vec<MaskedSequence> {
    instances
        .iter()
        .map(|i| MaskedSequence::from_prompt_completion(&i.prompt_tokens, &i.gold_trace_tokens))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_traces(
    path: &Path,
    traces: Vec<TraceRecord>,
    instances: &[TaskInstance],
    split: Split,
    source: &str,
) -> Result<Vec<TraceFileRecord>> {
    let records: Vec<TraceFileRecord> = traces
        .into_iter()
        .zip(instances)
        .map(|(mut t, inst)| {
            t.score(inst.gold_answer);
            TraceFileRecord {
                prompt_tokens: t.prompt_tokens,
                trace_tokens: t.generated_tokens,
                gold_answer: inst.gold_answer,
                split,
                source_artifact: source.to_string(),
                sampler: Some(t.sampler),
                extracted_answer: t.extracted_answer,
                correct: t.correct,
            }
        })
        .collect();
    write_jsonl(path, &records)?;
    Ok(records)
}

fn accuracy_of(records: &[TraceFileRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no trace records"));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

fn last_holdout_loss(csv: &str) -> Result<f64> {
    csv.lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(2).filter(|v| !v.is_empty()).map(str::to_string))
        .last()
        .ok_or_else(|| Error::invalid("loss curves have no holdout values"))?
        .parse()
        .map_err(|_| Error::invalid("unparseable holdout loss"))
}
