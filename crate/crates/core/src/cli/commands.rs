//! One function per CLI verb. Each validates its configuration first and
//! writes every artifact under a fresh run directory holding `config.toml`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use super::config::{Axis, RunConfig};
use super::gradcheck::{run_suite, CheckRow};
use super::plot::{line_chart, Series};
use crate::data::{load_cloud, save_xyz, write_manifest, Dataset, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::finetune::{few_shot, write_csv, EpochMetrics, FewShotSummary, FinetuneConfig, Finetuner, ResultRow, Topology, TopologySpec, RESULT_HEADER};
use crate::geometry::{chamfer_l2, farthest_point_sample, knn_group, nearest_indices, Point, PointCloud};
use crate::model::checkpoint::{Checkpoint, Progress};
use crate::model::{ModelConfig, ModelState, Pipeline, Protocol};
use crate::numerics::OpKind;
use crate::pretrain::{eval_reconstruction, reconstruct_masked, sample_mask, write_log, LossReport, Trainer};
use crate::seed::{self, Stream};

/// Creates `<out_dir>/<verb>-<utc timestamp>-s<seed>` and writes the config
/// into it.
pub fn create_run_dir(cfg: &RunConfig, verb: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{verb}-{stamp}-s{}", cfg.seed);
    let mut dir = cfg.out_dir.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = cfg.out_dir.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    Checkpoint::load(path)
}

fn init_seed(cfg: &RunConfig) -> u64 {
    seed::derive(cfg.seed, Stream::Init, 0)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PretrainOptions {
    /// Point-MAE style run: decoder over visible tokens and mask queries.
    pub no_regressor: bool,
    /// Run with and without the regressor under the same seed.
    pub compare: bool,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub checksum: String,
    pub history: Vec<LossReport>,
    /// Mean masked-patch Chamfer on the training clouds with fixed masks.
    pub final_l_rec: f64,
    /// `(history, final_l_rec)` of the run without the regressor.
    pub baseline: Option<(Vec<LossReport>, f64)>,
}

/// Pretrains `model` on `train`; epoch checkpoints go to `dir` when given.
pub fn pretrain_model(cfg: &RunConfig, model: ModelConfig, train: &Dataset, dir: Option<(&Path, &str)>) -> Result<(Trainer, Vec<LossReport>)> {
    let state = ModelState::new(model, init_seed(cfg))?;
    let mut trainer = Trainer::new(state, cfg.pretrain.clone(), cfg.seed, train.len())?;
    let mut history = Vec::new();
    for _ in 0..cfg.pretrain.epochs {
        let reports = trainer.train_epoch(&train.clouds, None)?;
        let n = reports.len() as f64;
        let (rec, align) = reports.iter().fold((0.0, 0.0), |(r, a), x| (r + x.l_rec / n, a + x.l_align / n));
        info!("epoch {:>4}  l_rec {rec:.5}  l_align {align:.5}", trainer.epoch);
        history.extend(reports);
        let every = cfg.pretrain.checkpoint_every;
        if let Some((dir, tag)) = dir {
            if every > 0 && trainer.epoch % every as u64 == 0 {
                trainer.checkpoint(Some(cfg.to_toml()?)).save(&dir.join(format!("{tag}epoch-{:04}.ckpt", trainer.epoch)))?;
            }
        }
    }
    Ok((trainer, history))
}

fn loss_series<'a>(label: &'a str, h: &[LossReport], f: fn(&LossReport) -> f64) -> Series<'a> {
    Series { label, points: h.iter().map(|r| (r.step as f64, f(r))).collect() }
}

pub fn cmd_pretrain(cfg: &RunConfig, opts: PretrainOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut model = cfg.model.clone();
    if opts.no_regressor {
        model.pipeline = Pipeline::DecoderOnly;
    }
    let dir = create_run_dir(cfg, "pretrain")?;
    let (train, _) = cfg.data.load(cfg.seed)?;
    info!("pretraining on {} clouds, {} epochs", train.len(), cfg.pretrain.epochs);

    let (trainer, history) = pretrain_model(cfg, model.clone(), &train, Some((&dir, "")))?;
    let final_l_rec = eval_reconstruction(&trainer.state, &train.clouds, cfg.seed)?;
    let checkpoint = dir.join("final.ckpt");
    let checksum = trainer.checkpoint(Some(cfg.to_toml()?)).save(&checkpoint)?;
    write_log(&dir.join("log.csv"), &history)?;

    let baseline = if opts.compare && model.pipeline != Pipeline::DecoderOnly {
        let base_model = ModelConfig { pipeline: Pipeline::DecoderOnly, ..model };
        let (bt, bh) = pretrain_model(cfg, base_model, &train, Some((&dir, "no-regressor-")))?;
        bt.checkpoint(Some(cfg.to_toml()?)).save(&dir.join("no-regressor-final.ckpt"))?;
        write_log(&dir.join("no-regressor-log.csv"), &bh)?;
        let l = eval_reconstruction(&bt.state, &train.clouds, cfg.seed)?;
        Some((bh, l))
    } else {
        None
    };

    let mut series = vec![loss_series("L_rec", &history, |r| r.l_rec)];
    if model.pipeline == Pipeline::Regress {
        series.push(loss_series("L_align", &history, |r| r.l_align));
    }
    if let Some((bh, _)) = &baseline {
        series[0].label = "L_rec with regressor";
        series.insert(1, loss_series("L_rec without regressor", bh, |r| r.l_rec));
    }
    write_text(&dir.join("loss.svg"), &line_chart("Pretraining loss", "step", "loss", &series))?;

    let mut summary = format!("run,final_l_rec\n{},{final_l_rec}\n", if opts.no_regressor { "no_regressor" } else { "regressor" });
    if let Some((_, l)) = &baseline {
        summary.push_str(&format!("no_regressor,{l}\n"));
    }
    write_text(&dir.join("summary.csv"), &summary)?;
    Ok(PretrainOutcome { run_dir: dir, checkpoint, checksum, history, final_l_rec, baseline })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneSummary {
    pub protocol: String,
    pub topology: String,
    pub feature_dim: usize,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    /// Backbone weights changed during tuning.
    pub backbone_drift: bool,
}

#[derive(Clone, Debug, Default)]
pub struct FewShotOptions {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<FinetuneSummary>,
    pub few_shot: Vec<(String, FewShotSummary)>,
}

/// Fine-tunes one protocol and topology from a pretrained state.
pub fn finetune_one(
    state: &ModelState,
    cfg: &FinetuneConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Finetuner, Vec<EpochMetrics>)> {
    let mut tuner = Finetuner::new(state.clone(), cfg.clone(), train.n_classes(), seed, train.len())?;
    let history = tuner.run(train, test)?;
    Ok((tuner, history))
}

fn check_architecture(ckpt: &ModelConfig, cfg: &ModelConfig) -> Result<()> {
    let pairs = [
        ("model.dim", ckpt.dim, cfg.dim),
        ("model.heads", ckpt.heads, cfg.heads),
        ("model.enc_depth", ckpt.enc_depth, cfg.enc_depth),
        ("model.reg_depth", ckpt.reg_depth, cfg.reg_depth),
        ("model.dec_depth", ckpt.dec_depth, cfg.dec_depth),
    ];
    for (field, a, b) in pairs {
        if a != b {
            return Err(Error::config(field, format!("checkpoint has {a}, config has {b}")));
        }
    }
    Ok(())
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    checkpoint: &Path,
    protocols: &[Protocol],
    topologies: &[Topology],
    few_shot_opts: Option<&FewShotOptions>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if protocols.is_empty() || topologies.is_empty() {
        return Err(Error::config("finetune", "need at least one protocol and one topology"));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    check_architecture(&ckpt.model.config, &cfg.model)?;
    let dir = create_run_dir(cfg, "finetune")?;
    let run_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (train, test) = cfg.data.load(cfg.seed)?;
    let mut base = ckpt.model;
    base.head = None;
    let drift_ref = base.backbone_checksum();

    let (mut rows, mut summary, mut shots) = (Vec::new(), Vec::new(), Vec::new());
    for &protocol in protocols {
        for &variant in topologies {
            let topology = TopologySpec { variant, ..cfg.finetune.topology };
            let fcfg = FinetuneConfig { protocol, topology, ..cfg.finetune.clone() };
            info!("fine-tuning {} with topology {}", protocol.name(), variant.name());
            let (tuner, history) = finetune_one(&base, &fcfg, cfg.seed, &train, &test)?;
            for h in &history {
                rows.push(ResultRow {
                    run_id: run_id.clone(),
                    protocol: protocol.name().into(),
                    topology: variant.name().into(),
                    seed: cfg.seed,
                    epoch: h.epoch,
                    train_acc: h.train_acc,
                    test_acc: h.test_acc,
                });
            }
            let last = history.last();
            summary.push(FinetuneSummary {
                protocol: protocol.name().into(),
                topology: variant.name().into(),
                feature_dim: topology.feature_dim(base.config.dim),
                final_train_acc: last.map_or(0.0, |h| h.train_acc),
                final_test_acc: last.map_or(0.0, |h| h.test_acc),
                best_test_acc: history.iter().map(|h| h.test_acc).fold(0.0, f64::max),
                backbone_drift: tuner.state.backbone_checksum() != drift_ref,
            });
            let run_cfg = RunConfig { finetune: fcfg.clone(), ..cfg.clone() };
            let tuned = Checkpoint {
                model: tuner.state,
                optimizer: None,
                progress: Progress { seed: cfg.seed, step: 0, epoch: tuner.epoch as u64 },
                run_config: Some(run_cfg.to_toml()?),
            };
            tuned.save(&dir.join(format!("finetuned-{}-{}.ckpt", protocol.name().to_lowercase(), variant.name())))?;

            if let Some(fs) = few_shot_opts {
                let s = few_shot(&base, &train, &fcfg, fs.n_way, fs.k_shot, fs.n_query, fs.episodes, cfg.seed)?;
                shots.push((format!("{}-{}", protocol.name(), variant.name()), s));
            }
        }
    }
    write_csv(&dir.join("results.csv"), &rows, &RESULT_HEADER)?;
    write_csv(
        &dir.join("summary.csv"),
        &summary,
        &["protocol", "topology", "feature_dim", "final_train_acc", "final_test_acc", "best_test_acc", "backbone_drift"],
    )?;
    if !shots.is_empty() {
        let mut text = String::from("config,n_way,k_shot,episodes,mean,std\n");
        for (name, s) in &shots {
            text.push_str(&format!("{name},{},{},{},{},{}\n", s.n_way, s.k_shot, s.accuracies.len(), s.mean, s.std));
        }
        write_text(&dir.join("few_shot.csv"), &text)?;
    }
    Ok(FinetuneOutcome { run_dir: dir, rows, summary, few_shot: shots })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub run_dir: PathBuf,
    /// `test_accuracy` for classifiers, `test_l_rec` for pretrained models.
    pub metric: &'static str,
    pub value: f64,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_architecture(&ckpt.model.config, &cfg.model)?;
    let dir = create_run_dir(cfg, "eval")?;
    let (_, test) = cfg.data.load(cfg.seed)?;
    let (metric, value) = if ckpt.model.head.is_some() {
        let fcfg = match &ckpt.run_config {
            Some(text) => RunConfig::from_toml(text, checkpoint)?.finetune,
            None => cfg.finetune.clone(),
        };
        let tuner = Finetuner::from_trained(ckpt.model, fcfg, ckpt.progress.seed, 0)?;
        ("test_accuracy", tuner.evaluate(&test)?)
    } else {
        ("test_l_rec", eval_reconstruction(&ckpt.model, &test.clouds, cfg.seed)?)
    };
    write_text(&dir.join("eval.csv"), &format!("checkpoint,metric,value\n{},{metric},{value}\n", checkpoint.display()))?;
    Ok(EvalOutcome { run_dir: dir, metric, value })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateRow {
    /// One label per requested axis.
    pub values: Vec<String>,
    /// One accuracy per configured protocol.
    pub accuracy: Vec<f64>,
    pub l_rec: f64,
}

#[derive(Clone, Debug)]
pub struct AblateOutcome {
    pub run_dir: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<AblateRow>,
    /// Directional checks against the paper's trends, inversions included.
    pub notes: Vec<String>,
}

struct Cell {
    labels: Vec<String>,
    model: ModelConfig,
    pretrain: crate::pretrain::PretrainConfig,
    topology: Topology,
}

fn build_cells(cfg: &RunConfig, axes: &[Axis]) -> Result<Vec<Cell>> {
    let a = &cfg.ablate;
    let mut cells = vec![Cell {
        labels: vec![],
        model: cfg.model.clone(),
        pretrain: cfg.pretrain.clone(),
        topology: a.base_topology,
    }];
    for &axis in axes {
        let mut next = Vec::new();
        for cell in &cells {
            for i in 0..a.axis_len(axis) {
                let mut c = Cell { labels: cell.labels.clone(), model: cell.model.clone(), pretrain: cell.pretrain.clone(), topology: cell.topology };
                let label = match axis {
                    Axis::RegDepth => {
                        c.model.reg_depth = a.reg_depth[i];
                        a.reg_depth[i].to_string()
                    }
                    Axis::DecDepth => {
                        c.model.dec_depth = a.dec_depth[i];
                        a.dec_depth[i].to_string()
                    }
                    Axis::MaskRatio => {
                        c.model.mask_ratio = a.mask_ratio[i];
                        a.mask_ratio[i].to_string()
                    }
                    Axis::AlignTarget => {
                        c.pretrain.align_target = a.align_target[i];
                        a.align_target[i].name().to_string()
                    }
                    Axis::RegressConstruct => {
                        a.regress_construct[i].apply(&mut c.model);
                        a.regress_construct[i].name().to_string()
                    }
                    Axis::Topology => {
                        c.topology = a.topology[i];
                        a.topology[i].name().to_string()
                    }
                };
                c.labels.push(label);
                c.model.validate()?;
                c.pretrain.validate()?;
                next.push(c);
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Trend checks mirroring the paper's claims; each note says whether the
/// desk-scale result follows or inverts it.
fn trend_notes(axes: &[Axis], header: &[String], rows: &[AblateRow]) -> Vec<String> {
    let mut notes = Vec::new();
    if axes.len() != 1 || rows.len() < 2 {
        return notes;
    }
    let protocols = &header[1..header.len() - 1];
    let pair = match axes[0] {
        Axis::MaskRatio => {
            let parse = |r: &AblateRow| r.values[0].parse::<f64>().unwrap_or(f64::NAN);
            let lo = rows.iter().min_by(|a, b| parse(a).total_cmp(&parse(b)));
            let hi = rows.iter().max_by(|a, b| parse(a).total_cmp(&parse(b)));
            lo.zip(hi).map(|(lo, hi)| (hi, lo, "higher mask ratio"))
        }
        Axis::RegressConstruct => {
            let find = |name: &str| rows.iter().find(|r| r.values[0] == name);
            find("both").zip(find("neither")).map(|(b, n)| (b, n, "regress and construct"))
        }
        _ => None,
    };
    if let Some((better, worse, claim)) = pair {
        for (i, p) in protocols.iter().enumerate() {
            let (a, b) = (better.accuracy[i], worse.accuracy[i]);
            let verdict = if a >= b { "holds" } else { "INVERTED" };
            notes.push(format!(
                "{claim}, {p}: {}={} {a:.4} vs {}={} {b:.4}: {verdict}",
                header[0], better.values[0], header[0], worse.values[0]
            ));
        }
    }
    notes
}

pub fn cmd_ablate(cfg: &RunConfig, axes: &[Axis]) -> Result<AblateOutcome> {
    cfg.validate()?;
    cfg.ablate.validate(axes)?;
    let cells = build_cells(cfg, axes)?;
    let dir = create_run_dir(cfg, "ablate")?;
    let (train, test) = cfg.data.load(cfg.seed)?;
    let protocols = cfg.ablate.protocols.clone();

    // cells that differ only in topology share one pretraining run
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        let key = serde_json::to_string(&(&c.model, &c.pretrain)).map_err(|e| Error::contract(e.to_string()))?;
        groups.entry(key).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let run_group = |members: &[usize]| -> Result<Vec<(usize, AblateRow)>> {
        let first = &cells[members[0]];
        let cell_cfg = RunConfig { model: first.model.clone(), pretrain: first.pretrain.clone(), ..cfg.clone() };
        let (trainer, _) = pretrain_model(&cell_cfg, first.model.clone(), &train, None)?;
        let l_rec = eval_reconstruction(&trainer.state, &train.clouds, cfg.seed)?;
        let mut out = Vec::new();
        for &m in members {
            let cell = &cells[m];
            let mut accuracy = Vec::new();
            for &protocol in &protocols {
                let topology = TopologySpec { variant: cell.topology, ..cfg.finetune.topology };
                let fcfg = FinetuneConfig { protocol, topology, ..cfg.finetune.clone() };
                let (_, history) = finetune_one(&trainer.state, &fcfg, cfg.seed, &train, &test)?;
                accuracy.push(history.last().map_or(0.0, |h| h.test_acc));
            }
            info!("cell {:?}: {:?}", cell.labels, accuracy);
            out.push((m, AblateRow { values: cell.labels.clone(), accuracy, l_rec }));
        }
        Ok(out)
    };

    let mut results: Vec<(usize, AblateRow)> = Vec::new();
    for chunk in groups.chunks(cfg.ablate.parallelism) {
        let outs: Vec<Result<Vec<(usize, AblateRow)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|g| s.spawn(|| run_group(g))).collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::contract("ablation worker panicked")))).collect()
        });
        for o in outs {
            results.extend(o?);
        }
    }
    results.sort_by_key(|(i, _)| *i);
    let rows: Vec<AblateRow> = results.into_iter().map(|(_, r)| r).collect();

    let mut header: Vec<String> = axes.iter().map(|a| a.name().to_string()).collect();
    header.extend(protocols.iter().map(|p| p.name().to_string()));
    header.push("l_rec".into());
    let mut text = header.join(",") + "\n";
    for r in &rows {
        let mut fields = r.values.clone();
        fields.extend(r.accuracy.iter().map(|a| a.to_string()));
        fields.push(r.l_rec.to_string());
        text.push_str(&(fields.join(",") + "\n"));
    }
    write_text(&dir.join("ablate.csv"), &text)?;
    let notes = if axes.len() == 1 {
        let mut h = vec![header[0].clone()];
        h.extend_from_slice(&header[1..]);
        trend_notes(axes, &h, &rows)
    } else {
        vec![]
    };
    write_text(&dir.join("trends.txt"), &notes.iter().map(|n| format!("{n}\n")).collect::<String>())?;
    Ok(AblateOutcome { run_dir: dir, header, rows, notes })
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<CheckRow>,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig, eps: f64, fault: Option<OpKind>) -> Result<GradcheckOutcome> {
    if !(eps > 0.0 && eps <= crate::numerics::MAX_EPS) {
        return Err(Error::config("eps", format!("must lie in (0, {}]", crate::numerics::MAX_EPS)));
    }
    let dir = create_run_dir(cfg, "gradcheck")?;
    let rows = run_suite(eps, fault)?;
    write_csv(&dir.join("gradcheck.csv"), &rows, &["name", "kind", "max_rel_err", "coords", "passed"])?;
    Ok(GradcheckOutcome { run_dir: dir, rows })
}

#[derive(Clone, Debug)]
pub struct ReconstructOutcome {
    pub run_dir: PathBuf,
    pub input: PathBuf,
    pub visible: PathBuf,
    pub reconstructed: PathBuf,
    pub masked_patches: usize,
    /// Chamfer distance between input and reconstruction.
    pub chamfer: f64,
}

/// Exports the input, the input without its masked patches, and that cloud
/// with the predicted masked patches added.
pub fn cmd_reconstruct(cfg: &RunConfig, checkpoint: &Path, input: &Path, mask_ratio: Option<f64>) -> Result<ReconstructOutcome> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let mut state = ckpt.model;
    if let Some(r) = mask_ratio {
        state.config.mask_ratio = r;
        state.config.validate()?;
    }
    let cloud = load_cloud(input, None)?;
    let dir = create_run_dir(cfg, "reconstruct")?;
    let (s, k) = (state.config.patch_count, state.config.neighbors);
    let centers = farthest_point_sample(&cloud, s, seed::derive(cfg.seed, Stream::Patch, 0))?;
    let patches = knn_group(&cloud, &centers, k)?;
    let plan = sample_mask(s, state.config.mask_ratio, seed::derive(cfg.seed, Stream::Mask, 0))?;
    let members: Vec<Vec<usize>> = centers.iter().map(|&c| nearest_indices(&cloud, &cloud.points()[c], k)).collect();
    let visible_idx: HashSet<usize> = plan.visible.iter().flat_map(|&p| members[p].iter().copied()).collect();
    let hidden_idx: HashSet<usize> = plan.masked.iter().flat_map(|&p| members[p].iter().copied()).collect();
    let kept: Vec<Point> = (0..cloud.len())
        .filter(|i| visible_idx.contains(i) || !hidden_idx.contains(i))
        .map(|i| cloud.points()[i])
        .collect();
    let predicted = reconstruct_masked(&state, &patches, &plan)?;
    let mut rebuilt = kept.clone();
    rebuilt.extend(predicted.into_iter().flatten());

    let paths = [dir.join("input.xyz"), dir.join("visible.xyz"), dir.join("reconstructed.xyz")];
    save_xyz(&paths[0], &cloud)?;
    save_xyz(&paths[1], &PointCloud::new(kept)?)?;
    let rebuilt = PointCloud::new(rebuilt)?;
    save_xyz(&paths[2], &rebuilt)?;
    let chamfer = chamfer_l2(cloud.points(), rebuilt.points())?;
    write_text(&dir.join("summary.csv"), &format!("masked_patches,chamfer\n{},{chamfer}\n", plan.masked.len()))?;
    let [input, visible, reconstructed] = paths;
    Ok(ReconstructOutcome { run_dir: dir, input, visible, reconstructed, masked_patches: plan.masked.len(), chamfer })
}

#[derive(Clone, Debug)]
pub struct GenDataOutcome {
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
    pub count: usize,
}

/// Writes the configured synthetic corpus as xyz files plus `manifest.csv`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataOutcome> {
    cfg.validate()?;
    let dir = create_run_dir(cfg, "gen-data")?;
    let (train, test) = cfg.data.synthetic.generate(cfg.seed)?;
    let mut entries = Vec::new();
    for (split, set) in [(Split::Train, &train), (Split::Test, &test)] {
        let name = if split == Split::Train { "train" } else { "test" };
        fs::create_dir_all(dir.join(name)).map_err(|e| Error::io(dir.join(name), e))?;
        for (i, c) in set.clouds.iter().enumerate() {
            let label = c.label.expect("synthetic clouds are labelled");
            let rel = PathBuf::from(name).join(format!("{i:05}_{}.xyz", set.class_names[label]));
            save_xyz(&dir.join(&rel), c)?;
            entries.push(ManifestEntry { path: rel, label, split });
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    write_text(&dir.join("classes.txt"), &(train.class_names.join("\n") + "\n"))?;
    Ok(GenDataOutcome { run_dir: dir, manifest, count: entries.len() })
}
