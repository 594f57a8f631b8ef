//! Training runs, corpus-level spotting, hold-out and leave-one-subject-out
//! evaluation, and their on-disk artifacts.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataio::{subsample_snippets, Corpus, Labels, Video};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, suppress, topk_pool, LossTerms, PoolingSpec};
use crate::metrics::{evaluate, Counts, EvalReport, K_EVAL};
use crate::numerics::{read_checkpoint, write_checkpoint, AdamState, Tape, Tensor};
use crate::pipeline::{dropout_seed, forward, infer, mix_seed, stable_hash, ModelParams, ModelSpec};
use crate::spotting::{sort_proposals, spot_video, Proposal, SpotConfig, VideoScores};

/// Attempts at finding a label-sharing pairing before `L_fc` is skipped.
pub const PAIRING_ATTEMPTS: usize = 100;

/// Header of the loss-trace CSV.
pub const TRACE_HEADER: &str = "iteration,L_sc,L_dc1,L_dc2,L_dc3,L_fc,L_sl,L_gl,L_total";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub terms: LossTerms<f64>,
    pub total: f64,
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration, t.sc, t.dc1, t.dc2, t.dc3, t.fc, t.sl, t.gl, self.total
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed trace line {line:?}"));
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 9 {
            return Err(bad());
        }
        let iteration = fields[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Ok(TraceRow {
            iteration,
            terms: LossTerms {
                sc: v[0],
                dc1: v[1],
                dc2: v[2],
                dc3: v[3],
                fc: v[4],
                sl: v[5],
                gl: v[6],
            },
            total: v[7],
        })
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in rows {
            writeln!(w, "{}", r.to_csv())?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Data(format!("{}: unexpected trace header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(TraceRow::from_csv).collect()
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, &params.named())?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_checkpoint(BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    ModelParams::from_named(entries, spec)
}

fn check_corpus(corpus: &Corpus, config: &RunConfig) -> Result<()> {
    for v in &corpus.videos {
        if config.g.is_some_and(|g| g != v.record.snippet_len) {
            return Err(Error::Data(format!(
                "{}: snippet length {} differs from configured g={:?}",
                v.id(),
                v.record.snippet_len,
                config.g
            )));
        }
        if config.fps.is_some_and(|f| f != v.record.fps) {
            return Err(Error::Data(format!(
                "{}: fps {} differs from configured fps={:?}",
                v.id(),
                v.record.fps,
                config.fps
            )));
        }
    }
    Ok(())
}

/// Chooses label-sharing pairs among the labelled videos of a batch.
/// Returns positions into `labels`, or `None` after the retry budget.
pub fn choose_pairs(labels: &[Labels], pair_count: usize, rng: &mut ChaCha8Rng) -> Option<Vec<(usize, usize)>> {
    let mut pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].any()).collect();
    let n = pair_count.min(pool.len()) / 2 * 2;
    if n < 2 {
        return None;
    }
    for _ in 0..PAIRING_ATTEMPTS {
        pool.shuffle(rng);
        let pairs: Vec<(usize, usize)> = pool[..n].chunks(2).map(|c| (c[0], c[1])).collect();
        if pairs.iter().all(|&(a, b)| labels[a].shared(&labels[b]) > 0) {
            return Some(pairs);
        }
    }
    None
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

/// Trains from a fresh initialization.
pub fn train(corpus: &Corpus, config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("cannot train on an empty corpus".into()));
    }
    check_corpus(corpus, config)?;
    let d = corpus.dim().expect("non-empty corpus");
    let params = ModelParams::init(d, &config.model, mix_seed(&[config.seed, stable_hash("init")]))?;
    train_from(corpus, config, params)
}

/// Trains starting from `params`.
pub fn train_from(corpus: &Corpus, config: &RunConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    let spec = config.loss_spec();
    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(config.learning_rate, sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, stable_hash("batches")]));
    let batch = config.batch_size.min(corpus.len());
    let mut trace = Vec::with_capacity(config.iterations);
    let mut warned_pairs = false;

    for iteration in 1..=config.iterations {
        let it = iteration as u64;
        let picked = rand::seq::index::sample(&mut rng, corpus.len(), batch).into_vec();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let mut videos = Vec::with_capacity(batch);
        for &i in &picked {
            let v = &corpus.videos[i];
            let id_hash = stable_hash(v.id());
            let (rgb, flow, _) = subsample_snippets(
                &v.rgb,
                &v.flow,
                config.t_train,
                mix_seed(&[config.seed, id_hash, it, 1]),
            );
            let x_rgb = tape.constant_tensor(rgb.values);
            let x_flow = tape.constant_tensor(flow.values);
            let out = forward(&mut tape, x_rgb, x_flow, &vars, Some(dropout_seed(config.seed, v.id(), it)))?;
            videos.push((out, v.record.labels));
        }
        let labels: Vec<Labels> = videos.iter().map(|(_, l)| *l).collect();
        let pairs = choose_pairs(&labels, config.pair_count, &mut rng).unwrap_or_else(|| {
            if !warned_pairs {
                warn!("iteration {iteration}: no label-sharing pairing found, L_fc skipped");
                warned_pairs = true;
            }
            Vec::new()
        });
        let (total, terms) = batch_loss(&mut tape, &videos, &pairs, &spec)?;
        tape.backward(total)?;
        let grads: Vec<Vec<f64>> = vars
            .all()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.step(&mut params.tensors_mut(), &grad_refs)?;

        let row = TraceRow {
            iteration,
            terms: terms.values(&tape),
            total: tape.item(total),
        };
        if iteration == 1 || iteration % 50 == 0 || iteration == config.iterations {
            info!("iteration {iteration}: L = {:.5}", row.total);
        }
        trace.push(row);
    }
    Ok(TrainOutcome { params, trace })
}

/// Attention, suppressed T-CAM and pooled class probabilities of one video.
pub fn video_scores(params: &ModelParams, video: &Video, pooling: &PoolingSpec) -> Result<(Vec<f64>, Tensor, Vec<f64>)> {
    let out = infer(params, &video.rgb.values, &video.flow.values)?;
    let mut tape = Tape::new();
    let s = tape.constant_tensor(out.s);
    let a = tape.constant_tensor(out.a.clone());
    let pooled = topk_pool(&mut tape, s, pooling)?;
    let s_hat = suppress(&mut tape, s, a)?;
    Ok((
        out.a.into_data(),
        tape.value(s_hat).clone(),
        tape.value(pooled.p).data().to_vec(),
    ))
}

/// Proposals for every video, in canonical order.
pub fn spot_corpus(
    params: &ModelParams,
    corpus: &Corpus,
    pooling: &PoolingSpec,
    spot: &SpotConfig,
) -> Result<Vec<Proposal>> {
    if let Some(d) = corpus.dim() {
        if d != params.dim() {
            return Err(Error::Data(format!(
                "corpus features have dimension {d}, checkpoint expects {}",
                params.dim()
            )));
        }
    }
    let mut all = Vec::new();
    for v in &corpus.videos {
        let (a, s_hat, p) = video_scores(params, v, pooling)?;
        let scores = VideoScores {
            video_id: v.id(),
            a: &a,
            s_hat: &s_hat,
            p: &p,
            g: v.record.snippet_len,
            fps: v.record.fps,
        };
        all.extend(spot_video(&scores, spot)?);
    }
    sort_proposals(&mut all);
    Ok(all)
}

fn subset(corpus: &Corpus, keep: impl Fn(&Video) -> bool) -> Corpus {
    Corpus {
        videos: corpus.videos.iter().filter(|v| keep(v)).cloned().collect(),
    }
}

/// Seeded split into `(train, test)`; the test side gets `ceil(fraction·n)` videos.
pub fn holdout_split(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    let n = corpus.len();
    let n_test = (fraction * n as f64).ceil() as usize;
    if n < 2 || n_test == 0 || n_test >= n {
        return Err(Error::Config(format!(
            "cannot hold out {fraction} of {n} videos with both sides non-empty"
        )));
    }
    let mut ids: Vec<&str> = corpus.videos.iter().map(Video::id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, stable_hash("holdout")])));
    let test: BTreeSet<&str> = ids[..n_test].iter().copied().collect();
    Ok((
        subset(corpus, |v| !test.contains(v.id())),
        subset(corpus, |v| test.contains(v.id())),
    ))
}

/// Train / spot / evaluate on one hold-out split.
#[derive(Debug, Clone)]
pub struct HoldoutOutcome {
    pub train: TrainOutcome,
    pub test_ids: Vec<String>,
    pub proposals: Vec<Proposal>,
    pub report: EvalReport,
}

pub fn run_holdout(corpus: &Corpus, config: &RunConfig) -> Result<HoldoutOutcome> {
    let (train_set, test_set) = holdout_split(corpus, config.holdout_fraction, config.seed)?;
    let trained = train(&train_set, config)?;
    let proposals = spot_corpus(&trained.params, &test_set, &config.pooling, &config.spot)?;
    let report = evaluate(&proposals, &test_set.records(), K_EVAL)?;
    Ok(HoldoutOutcome {
        train: trained,
        test_ids: test_set.videos.iter().map(|v| v.id().to_string()).collect(),
        proposals,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct Fold {
    pub subject: String,
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub proposals: Vec<Proposal>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct LosoOutcome {
    pub folds: Vec<Fold>,
    pub proposals: Vec<Proposal>,
    /// Counts pooled over all folds before rates are computed.
    pub report: EvalReport,
}

/// One fold per distinct subject: train on the others, evaluate on it.
pub fn loso(corpus: &Corpus, config: &RunConfig) -> Result<LosoOutcome> {
    config.validate()?;
    let subjects: BTreeSet<&str> = corpus.videos.iter().map(|v| v.record.subject.as_str()).collect();
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-subject-out needs at least two subjects, found {}",
            subjects.len()
        )));
    }
    let mut folds = Vec::new();
    let mut all = Vec::new();
    for subject in &subjects {
        info!("fold {subject}");
        let train_set = subset(corpus, |v| v.record.subject != *subject);
        let test_set = subset(corpus, |v| v.record.subject == *subject);
        let fold_config = RunConfig {
            seed: mix_seed(&[config.seed, stable_hash(subject)]),
            ..config.clone()
        };
        let trained = train(&train_set, &fold_config)?;
        let proposals = spot_corpus(&trained.params, &test_set, &config.pooling, &config.spot)?;
        let report = evaluate(&proposals, &test_set.records(), K_EVAL)?;
        all.extend(proposals.iter().cloned());
        folds.push(Fold {
            subject: subject.to_string(),
            params: trained.params,
            trace: trained.trace,
            proposals,
            report,
        });
    }
    sort_proposals(&mut all);
    let report = evaluate(&all, &corpus.records(), K_EVAL)?;
    debug_assert_eq!(
        folds.iter().map(|f| f.report.counts).sum::<Counts>(),
        report.counts
    );
    Ok(LosoOutcome {
        folds,
        proposals: all,
        report,
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
