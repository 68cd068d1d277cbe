//! Filtered ranking: MRR and Hits@K for the fused prediction and for each
//! view separately, plus logit-ratio sweeps.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KgtError, Result};
use crate::feature_bank::write_atomic;
use crate::kg_store::{EntityId, FilterIndex, KnowledgeGraph, RelationId, Split, Triple};
use crate::model::KgtModel;
use crate::predictor::fuse_logits;

/// `1 +` the number of unfiltered competitors scoring at least as high as
/// the target (ties count against the target).
pub fn filtered_rank(
    logits: ArrayView1<f64>,
    head: EntityId,
    relation: RelationId,
    target: EntityId,
    filter: &FilterIndex,
) -> Result<usize> {
    let ti = target.index();
    if ti >= logits.len() {
        return Err(KgtError::Invalid(format!(
            "target {ti} outside {} logits",
            logits.len()
        )));
    }
    let known = filter.tails(head, relation);
    let s = logits[ti];
    let mut rank = 1;
    for (e, &v) in logits.iter().enumerate() {
        if e == ti || v < s {
            continue;
        }
        if known.is_some_and(|k| k.contains(&EntityId(e as u32))) {
            continue;
        }
        rank += 1;
    }
    Ok(rank)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            queries: ranks.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub triple: Triple,
    pub fused: usize,
    pub text: Option<usize>,
    pub structure: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub split: String,
    pub fused: Metrics,
    pub text: Option<Metrics>,
    pub structure: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    pub queries: Vec<QueryRank>,
    pub summary: RankSummary,
}

impl RankReport {
    pub fn from_queries(split: Split, queries: Vec<QueryRank>) -> Self {
        let fused: Vec<usize> = queries.iter().map(|q| q.fused).collect();
        let view = |f: fn(&QueryRank) -> Option<usize>| -> Option<Metrics> {
            let r: Option<Vec<usize>> = queries.iter().map(f).collect();
            r.filter(|r| !r.is_empty()).map(|r| Metrics::from_ranks(&r))
        };
        let summary = RankSummary {
            split: split.name().to_string(),
            fused: Metrics::from_ranks(&fused),
            text: view(|q| q.text),
            structure: view(|q| q.structure),
        };
        Self { queries, summary }
    }

    pub fn to_csv(&self, kg: &KnowledgeGraph) -> String {
        let mut out = String::from("head,relation,tail,fused_rank,text_rank,struct_rank\n");
        let opt = |r: Option<usize>| r.map_or(String::new(), |r| r.to_string());
        for q in &self.queries {
            let (h, r, t) = kg.surface(q.triple);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(h),
                csv_field(r),
                csv_field(t),
                q.fused,
                opt(q.text),
                opt(q.structure)
            );
        }
        out
    }

    /// Writes `<stem>.csv` (per query) and `<stem>.json` (aggregates).
    pub fn save(&self, kg: &KnowledgeGraph, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv(kg).as_bytes())?;
        write_atomic(
            &dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.summary)?.as_bytes(),
        )
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn require_queries(kg: &KnowledgeGraph, split: Split) -> Result<&[Triple]> {
    if !kg.is_augmented() {
        return Err(KgtError::NotAugmented);
    }
    let q = kg.split(split);
    if q.is_empty() {
        return Err(KgtError::EmptySplit(split.name()));
    }
    Ok(q)
}

/// Ranks every (inverse-augmented) query of `split` in query order.
pub fn evaluate(model: &KgtModel, kg: &KnowledgeGraph, split: Split, filter: &FilterIndex) -> Result<RankReport> {
    let queries = require_queries(kg, split)?;
    let ranks: Result<Vec<QueryRank>> = queries
        .par_iter()
        .map(|&t| {
            let p = model.predict(kg, t.head, t.relation)?;
            let rank = |l: ArrayView1<f64>| filtered_rank(l, t.head, t.relation, t.tail, filter);
            Ok(QueryRank {
                triple: t,
                fused: rank(p.fused.view())?,
                text: p.text.as_ref().map(|l| rank(l.view())).transpose()?,
                structure: p.structure.as_ref().map(|l| rank(l.view())).transpose()?,
            })
        })
        .collect();
    Ok(RankReport::from_queries(split, ranks?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: f64,
    pub summary: RankSummary,
}

/// Re-weights cached per-view logits with `λ_t = γ`, `λ_s = 1` for each γ,
/// without retraining.
pub fn sweep_gamma_rescore(
    model: &KgtModel,
    kg: &KnowledgeGraph,
    split: Split,
    filter: &FilterIndex,
    gammas: &[f64],
) -> Result<Vec<GammaPoint>> {
    if gammas.is_empty() {
        return Err(KgtError::Invalid("empty gamma list".into()));
    }
    let queries = require_queries(kg, split)?;
    let cached: Result<Vec<_>> = queries
        .par_iter()
        .map(|&t| {
            let p = model.predict(kg, t.head, t.relation)?;
            match (p.text, p.structure) {
                (Some(a), Some(b)) => Ok((t, a, b)),
                _ => Err(KgtError::Conflict("rescoring needs both prediction views".into())),
            }
        })
        .collect();
    let cached = cached?;
    gammas
        .iter()
        .map(|&gamma| {
            let ranks: Result<Vec<QueryRank>> = cached
                .iter()
                .map(|(t, pt, ps)| {
                    let fused = fuse_logits(pt.view(), ps.view(), (gamma, 1.0))?;
                    let rank = |l: ArrayView1<f64>| filtered_rank(l, t.head, t.relation, t.tail, filter);
                    Ok(QueryRank {
                        triple: *t,
                        fused: rank(fused.view())?,
                        text: Some(rank(pt.view())?),
                        structure: Some(rank(ps.view())?),
                    })
                })
                .collect();
            Ok(GammaPoint {
                gamma,
                summary: RankReport::from_queries(split, ranks?).summary,
            })
        })
        .collect()
}

/// Table of γ against fused MRR and Hits.
pub fn gamma_table_csv(points: &[GammaPoint]) -> String {
    let mut out = String::from("gamma,mrr,hits1,hits3,hits10\n");
    for p in points {
        let m = p.summary.fused;
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", p.gamma, m.mrr, m.hits1, m.hits3, m.hits10);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::{FilterPolicy, GraphBuilder};
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn filter_for(known: &[(u32, u32, u32)]) -> FilterIndex {
        let mut b = GraphBuilder::new();
        let max = known.iter().map(|k| k.0.max(k.2)).max().unwrap_or(0).max(4);
        for e in 0..=max {
            b.entity(&format!("e{e}"));
        }
        b.relation("r0");
        b.relation("r1");
        for &(h, r, t) in known {
            b.push(Split::Train, &format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
        }
        if known.is_empty() {
            b.push(Split::Train, "e0", "r1", "e1");
        }
        let kg = b.build().unwrap().augment_inverses().unwrap();
        FilterIndex::build(&kg, FilterPolicy::TrainOnly).unwrap()
    }

    #[test]
    fn strict_max_is_rank_one() {
        let f = filter_for(&[]);
        let l = array![0.1, 3.0, -1.0, 0.5, 2.9];
        assert_eq!(filtered_rank(l.view(), EntityId(0), RelationId(0), EntityId(1), &f).unwrap(), 1);
    }

    #[test]
    fn filtered_competitor_is_skipped() {
        // target 3rd highest; one of the two above it is a known answer
        let f = filter_for(&[(0, 0, 4)]);
        let l = array![0.1, 2.0, -1.0, 1.0, 3.0];
        assert_eq!(filtered_rank(l.view(), EntityId(0), RelationId(0), EntityId(3), &f).unwrap(), 2);
    }

    #[test]
    fn everything_filtered_is_rank_one() {
        let f = filter_for(&[(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 4)]);
        let l = array![5.0, 4.0, 3.0, -9.0, 2.0];
        assert_eq!(filtered_rank(l.view(), EntityId(0), RelationId(0), EntityId(3), &f).unwrap(), 1);
    }

    #[test]
    fn ties_count_against_target() {
        let f = filter_for(&[]);
        let l = Array1::from_elem(5, 1.0);
        assert_eq!(filtered_rank(l.view(), EntityId(0), RelationId(0), EntityId(2), &f).unwrap(), 5);
        assert!(filtered_rank(l.view(), EntityId(0), RelationId(0), EntityId(9), &f).is_err());
    }

    #[test]
    fn metric_arithmetic() {
        let m = Metrics::from_ranks(&[1, 4]);
        assert_eq!(m.mrr, 0.625);
        assert_eq!((m.hits1, m.hits3, m.hits10), (0.5, 0.5, 1.0));
        let m = Metrics::from_ranks(&[1, 1, 1]);
        assert_eq!((m.mrr, m.hits1, m.hits3, m.hits10), (1.0, 1.0, 1.0, 1.0));
    }

    proptest! {
        #[test]
        fn metric_ordering(ranks in prop::collection::vec(1usize..60, 1..40)) {
            let m = Metrics::from_ranks(&ranks);
            prop_assert!(m.hits1 <= m.mrr && m.mrr <= 1.0 && m.mrr > 0.0);
            prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
        }
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
