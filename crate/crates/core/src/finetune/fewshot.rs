use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{Combine, FinetuneConfig, Finetuner, Topology};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::seed::{self, Stream};

/// An N-way K-shot task; labels are remapped to `0..n_way` in the order of
/// `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    /// `(dataset index, episode label)`.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

pub fn few_shot_episode(labels: &[usize], n_way: usize, k_shot: usize, n_query: usize, seed: u64) -> Result<Episode> {
    if n_way < 2 || k_shot == 0 || n_query == 0 {
        return Err(Error::contract(format!("invalid episode {n_way}-way {k_shot}-shot with {n_query} queries")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let by_class: Vec<Vec<usize>> =
        (0..n_classes).map(|c| labels.iter().enumerate().filter(|&(_, &l)| l == c).map(|(i, _)| i).collect()).collect();
    let eligible: Vec<usize> = (0..n_classes).filter(|&c| by_class[c].len() >= k_shot + n_query).collect();
    if eligible.len() < n_way {
        return Err(Error::contract(format!(
            "{n_way}-way {k_shot}-shot needs {n_way} classes with {} samples, found {}",
            k_shot + n_query,
            eligible.len()
        )));
    }
    let mut rng = seed::rng(seed, Stream::Episode, 0);
    let classes: Vec<usize> = index::sample(&mut rng, eligible.len(), n_way).into_iter().map(|i| eligible[i]).collect();
    let (mut support, mut query) = (Vec::new(), Vec::new());
    for (new_label, &c) in classes.iter().enumerate() {
        let mut members = by_class[c].clone();
        members.shuffle(&mut rng);
        support.extend(members[..k_shot].iter().map(|&i| (i, new_label)));
        query.extend(members[k_shot..k_shot + n_query].iter().map(|&i| (i, new_label)));
    }
    Ok(Episode { classes, support, query })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSummary {
    pub n_way: usize,
    pub k_shot: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn episode_set(data: &Dataset, members: &[(usize, usize)], n_way: usize) -> Dataset {
    Dataset {
        name: data.name.clone(),
        class_names: (0..n_way).map(|c| format!("way{c}")).collect(),
        clouds: members.iter().map(|&(i, l)| data.clouds[i].clone().with_label(l)).collect(),
    }
}

/// Fine-tunes a fresh copy of `state` on each episode and reports query
/// accuracy statistics. Topology D defaults to additive combination here.
#[allow(clippy::too_many_arguments)]
pub fn few_shot(
    state: &ModelState,
    data: &Dataset,
    config: &FinetuneConfig,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    episodes: usize,
    seed: u64,
) -> Result<FewShotSummary> {
    if episodes == 0 {
        return Err(Error::contract("few-shot needs at least one episode"));
    }
    let labels = data.labels()?;
    let mut config = config.clone();
    if config.topology.variant == Topology::D && config.topology.combine.is_none() {
        config.topology.combine = Some(Combine::Add);
    }
    let mut accuracies = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let ep_seed = seed::derive(seed, Stream::Episode, e as u64);
        let ep = few_shot_episode(&labels, n_way, k_shot, n_query, ep_seed)?;
        let support = episode_set(data, &ep.support, n_way);
        let query = episode_set(data, &ep.query, n_way);
        let mut tuner = Finetuner::new(state.clone(), config.clone(), n_way, ep_seed, support.len())?;
        for _ in 0..config.epochs {
            tuner.train_epoch(&support)?;
        }
        accuracies.push(tuner.evaluate(&query)?);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(FewShotSummary { n_way, k_shot, accuracies, mean, std })
}
