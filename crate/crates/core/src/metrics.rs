//! Offline ranking metrics and online-style card metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{day_of, Sample};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("AUC is undefined without both classes ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    Label(u8),
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("top-N cut-off must be at least 1")]
    InvalidN,
    #[error("no user has a positive sample; HR/NDCG are undefined")]
    EmptyCohort,
    #[error("no concept card was exposed")]
    NoExposures,
    #[error("click on user {user}, concept {concept}, day {day} without a matching exposure")]
    ClickWithoutExposure { user: u32, concept: u32, day: i64 },
}

/// Mann–Whitney AUC with ties counted as one half, via average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricError::Label(l));
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(s));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based) ranks of the positives, ties sharing their mean
    // rank. Doubled so tie groups stay in integers.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        // ranks i+1 ..= j+1, mean (i + j + 2) / 2
        twice_rank_sum += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// One user's candidate concepts, best first, and which of them are positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: u32,
    pub ranked: Vec<u32>,
    pub positives: BTreeSet<u32>,
}

/// Per-user rankings of the scored samples. A (user, concept) pair seen more
/// than once keeps its highest score and is positive if any copy is.
/// Ties are broken by concept index ascending. Users without a positive are
/// dropped.
pub fn rankings(samples: &[Sample], scores: &[f64]) -> Result<Vec<UserRanking>, MetricError> {
    if samples.len() != scores.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: samples.len(),
        });
    }
    let mut per_user: BTreeMap<u32, BTreeMap<u32, (f64, bool)>> = BTreeMap::new();
    for (s, &score) in samples.iter().zip(scores) {
        if !score.is_finite() {
            return Err(MetricError::NonFinite(score));
        }
        let e = per_user
            .entry(s.user)
            .or_default()
            .entry(s.concept)
            .or_insert((f64::NEG_INFINITY, false));
        e.0 = e.0.max(score);
        e.1 |= s.label == 1;
    }
    let mut out = Vec::new();
    for (user, concepts) in per_user {
        let positives: BTreeSet<u32> = concepts.iter().filter(|(_, v)| v.1).map(|(&c, _)| c).collect();
        if positives.is_empty() {
            continue;
        }
        let mut ranked: Vec<(u32, f64)> = concepts.into_iter().map(|(c, v)| (c, v.0)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.push(UserRanking {
            user,
            ranked: ranked.into_iter().map(|(c, _)| c).collect(),
            positives,
        });
    }
    Ok(out)
}

fn cohort(users: &[UserRanking], n: usize) -> Result<(), MetricError> {
    if n < 1 {
        return Err(MetricError::InvalidN);
    }
    if users.iter().all(|u| u.positives.is_empty()) {
        return Err(MetricError::EmptyCohort);
    }
    Ok(())
}

/// Share of users with at least one positive in their top `n`.
pub fn hr_at_n(users: &[UserRanking], n: usize) -> Result<f64, MetricError> {
    cohort(users, n)?;
    let users: Vec<_> = users.iter().filter(|u| !u.positives.is_empty()).collect();
    let hits = users
        .iter()
        .filter(|u| u.ranked.iter().take(n).any(|c| u.positives.contains(c)))
        .count();
    Ok(hits as f64 / users.len() as f64)
}

/// Binary-relevance NDCG@n averaged over users with a positive.
pub fn ndcg_at_n(users: &[UserRanking], n: usize) -> Result<f64, MetricError> {
    cohort(users, n)?;
    let users: Vec<_> = users.iter().filter(|u| !u.positives.is_empty()).collect();
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let total: f64 = users
        .iter()
        .map(|u| {
            let dcg: f64 = u
                .ranked
                .iter()
                .take(n)
                .enumerate()
                .filter(|(_, c)| u.positives.contains(c))
                .map(|(i, _)| discount(i + 1))
                .sum();
            let idcg: f64 = (1..=u.positives.len().min(n)).map(discount).sum();
            dcg / idcg
        })
        .sum();
    Ok(total / users.len() as f64)
}

/// A concept card shown to, or clicked by, a user on a given day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CardEvent {
    pub user: u32,
    pub concept: u32,
    pub day: i64,
}

/// Card clicks over card exposures. Every click must match an exposure.
pub fn ctr(exposures: &[CardEvent], clicks: &[CardEvent]) -> Result<f64, MetricError> {
    if exposures.is_empty() {
        return Err(MetricError::NoExposures);
    }
    let shown: BTreeSet<&CardEvent> = exposures.iter().collect();
    if let Some(c) = clicks.iter().find(|c| !shown.contains(c)) {
        return Err(MetricError::ClickWithoutExposure {
            user: c.user,
            concept: c.concept,
            day: c.day,
        });
    }
    Ok(clicks.len() as f64 / exposures.len() as f64)
}

/// A category click, flagged when it came through a concept card.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryClick {
    pub user: u32,
    pub category: u32,
    pub time: i64,
    pub via_card: bool,
}

pub const DISCOVERY_WINDOW_DAYS: i64 = 15;

/// For each user with a card-attributed click on `day`: the share of that
/// day's card-clicked categories that the user did not click at all in the
/// previous `window_days` days. Averaged over those users; `None` if there
/// are none.
pub fn discovery(log: &[CategoryClick], day: i64, window_days: i64) -> Option<f64> {
    let mut today: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut history: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for c in log {
        let d = day_of(c.time);
        if d == day && c.via_card {
            today.entry(c.user).or_default().insert(c.category);
        } else if d < day && d >= day - window_days {
            history.entry(c.user).or_default().insert(c.category);
        }
    }
    if today.is_empty() {
        return None;
    }
    let empty = BTreeSet::new();
    let total: f64 = today
        .iter()
        .map(|(user, cats)| {
            let seen = history.get(user).unwrap_or(&empty);
            cats.difference(seen).count() as f64 / cats.len() as f64
        })
        .sum();
    Some(total / today.len() as f64)
}
