//! Knowledge-graph loading, inverse-relation augmentation and the filter
//! index used by filtered ranking.
//!
//! Ids are dense and 0-based. Entities and relations are numbered in order of
//! first appearance over train, then valid, then test, so two loads of the same
//! files always produce the same ids.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KgtError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = KgtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(KgtError::Invalid(format!(
                "unknown split `{other}` (expected train, valid or test)"
            ))),
        }
    }
}

/// Surface text used for the inverse of a relation.
pub fn inverse_relation_text(name: &str) -> String {
    format!("inverse of {name}")
}

/// Entity and relation vocabularies plus the three triple splits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    entity_texts: Vec<String>,
    entity_index: BTreeMap<String, EntityId>,
    relation_names: Vec<String>,
    relation_index: BTreeMap<String, RelationId>,
    base_relations: usize,
    augmented: bool,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
}

/// Incremental builder; used by the file loader and by synthetic generators.
#[derive(Default)]
pub struct GraphBuilder {
    entity_names: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    descriptions: HashMap<String, String>,
    relation_names: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    splits: [Vec<Triple>; 3],
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = EntityId(self.entity_names.len() as u32);
        self.entity_names.push(name.to_string());
        self.entity_index.insert(name.to_string(), id);
        id
    }

    pub fn relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        let id = RelationId(self.relation_names.len() as u32);
        self.relation_names.push(name.to_string());
        self.relation_index.insert(name.to_string(), id);
        id
    }

    pub fn describe(&mut self, entity: &str, description: &str) {
        self.descriptions
            .insert(entity.to_string(), description.to_string());
    }

    pub fn push(&mut self, split: Split, head: &str, relation: &str, tail: &str) -> Triple {
        let t = Triple::new(self.entity(head), self.relation(relation), self.entity(tail));
        self.splits[split_slot(split)].push(t);
        t
    }

    pub fn build(self) -> Result<KnowledgeGraph> {
        let [train, valid, test] = self.splits;
        let train = dedup(train);
        let valid = dedup(valid);
        let test = dedup(test);
        if train.is_empty() {
            return Err(KgtError::EmptySplit("train"));
        }
        let seen: HashSet<Triple> = train.iter().copied().collect();
        for (split, triples) in [(Split::Valid, &valid), (Split::Test, &test)] {
            if let Some(t) = triples.iter().find(|t| seen.contains(t)) {
                return Err(KgtError::Invalid(format!(
                    "triple {:?} appears in both train and {}",
                    t,
                    split.name()
                )));
            }
        }
        let valid_set: HashSet<Triple> = valid.iter().copied().collect();
        if let Some(t) = test.iter().find(|t| valid_set.contains(t)) {
            return Err(KgtError::Invalid(format!(
                "triple {t:?} appears in both valid and test"
            )));
        }
        let entity_texts = self
            .entity_names
            .iter()
            .map(|n| self.descriptions.get(n).cloned().unwrap_or_else(|| n.clone()))
            .collect();
        let base_relations = self.relation_names.len();
        Ok(KnowledgeGraph {
            entity_index: self.entity_index.into_iter().collect(),
            entity_names: self.entity_names,
            entity_texts,
            relation_index: self.relation_index.into_iter().collect(),
            relation_names: self.relation_names,
            base_relations,
            augmented: false,
            train,
            valid,
            test,
        })
    }
}

fn split_slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

fn dedup(triples: Vec<Triple>) -> Vec<Triple> {
    let mut seen = HashSet::with_capacity(triples.len());
    triples.into_iter().filter(|t| seen.insert(*t)).collect()
}

/// File names making up an on-disk dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub train: String,
    pub valid: String,
    pub test: String,
    /// `entity<TAB>description`, optional.
    pub descriptions: Option<String>,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            train: "train.tsv".into(),
            valid: "valid.tsv".into(),
            test: "test.tsv".into(),
            descriptions: Some("entity2text.tsv".into()),
        }
    }
}

fn read_tsv(path: &Path, fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<String> = if fields == 2 {
            // descriptions may themselves contain tabs
            match line.split_once('\t') {
                Some((a, b)) => vec![a.to_string(), b.to_string()],
                None => vec![line.to_string()],
            }
        } else {
            line.split('\t').map(str::to_string).collect()
        };
        if parts.len() != fields {
            return Err(KgtError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {fields} tab-separated fields, found {}", parts.len()),
            });
        }
        rows.push((i + 1, parts));
    }
    Ok(rows)
}

/// Loads a dataset directory.
///
/// Entities may first appear in valid/test only if the description file
/// lists them; relations must appear in train.
pub fn load_dataset(root: &Path, layout: &DatasetLayout) -> Result<KnowledgeGraph> {
    let train_path = root.join(&layout.train);
    let train_rows = read_tsv(&train_path, 3)?;
    if train_rows.is_empty() {
        return Err(KgtError::EmptySplit("train"));
    }
    let mut described: Vec<(String, String)> = Vec::new();
    if let Some(desc) = &layout.descriptions {
        let p = root.join(desc);
        if p.exists() {
            described = read_tsv(&p, 2)?
                .into_iter()
                .map(|(_, mut v)| {
                    let d = v.pop().unwrap();
                    (v.pop().unwrap(), d)
                })
                .collect();
        }
    }
    let known_entities: HashSet<&str> = described.iter().map(|(e, _)| e.as_str()).collect();

    let mut b = GraphBuilder::new();
    for (_, row) in &train_rows {
        b.push(Split::Train, &row[0], &row[1], &row[2]);
    }
    for (split, file) in [(Split::Valid, &layout.valid), (Split::Test, &layout.test)] {
        let path: PathBuf = root.join(file);
        for (line, row) in read_tsv(&path, 3)? {
            for ent in [&row[0], &row[2]] {
                if !b.entity_index.contains_key(ent.as_str()) && !known_entities.contains(ent.as_str())
                {
                    return Err(KgtError::UnknownSymbol {
                        kind: "entity",
                        name: ent.clone(),
                        context: format!("{}:{}", path.display(), line),
                    });
                }
            }
            if !b.relation_index.contains_key(row[1].as_str()) {
                return Err(KgtError::UnknownSymbol {
                    kind: "relation",
                    name: row[1].clone(),
                    context: format!("{}:{}", path.display(), line),
                });
            }
            b.push(split, &row[0], &row[1], &row[2]);
        }
    }
    for (entity, text) in &described {
        b.entity(entity);
        b.describe(entity, text);
    }
    b.build()
}

/// Writes the base (non-inverse) triples and every entity description in
/// the layout `load_dataset` reads.
pub fn write_dataset(kg: &KnowledgeGraph, root: &Path, layout: &DatasetLayout) -> Result<()> {
    fs::create_dir_all(root)?;
    for (split, file) in [
        (Split::Train, &layout.train),
        (Split::Valid, &layout.valid),
        (Split::Test, &layout.test),
    ] {
        let mut out = String::new();
        for &t in kg.split(split) {
            if t.relation.index() < kg.num_base_relations() {
                let (h, r, t) = kg.surface(t);
                out.push_str(&format!("{h}\t{r}\t{t}\n"));
            }
        }
        fs::write(root.join(file), out)?;
    }
    if let Some(desc) = &layout.descriptions {
        let mut out = String::new();
        for e in kg.entities() {
            out.push_str(&format!("{}\t{}\n", kg.entity_name(e), kg.entity_text(e)));
        }
        fs::write(root.join(desc), out)?;
    }
    Ok(())
}

impl KnowledgeGraph {
    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    /// Size of the relation vocabulary, including inverses once augmented.
    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.base_relations
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entity_names[e.index()]
    }

    /// Description if the dataset provided one, otherwise the surface name.
    pub fn entity_text(&self, e: EntityId) -> &str {
        &self.entity_texts[e.index()]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relation_names[r.index()]
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn entity_texts(&self) -> impl Iterator<Item = &str> {
        self.entity_texts.iter().map(String::as_str)
    }

    pub fn relation_texts(&self) -> impl Iterator<Item = &str> {
        self.relation_names.iter().map(String::as_str)
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities() as u32).map(EntityId)
    }

    /// Maps a relation to its inverse (and back). Only valid once augmented.
    pub fn inverse_of(&self, r: RelationId) -> RelationId {
        let n = self.base_relations as u32;
        if r.0 < n {
            RelationId(r.0 + n)
        } else {
            RelationId(r.0 - n)
        }
    }

    /// Inverse of a triple: `(h, r, t) -> (t, r^-1, h)`.
    pub fn invert(&self, t: Triple) -> Triple {
        Triple::new(t.tail, self.inverse_of(t.relation), t.head)
    }

    pub fn surface(&self, t: Triple) -> (&str, &str, &str) {
        (
            self.entity_name(t.head),
            self.relation_name(t.relation),
            self.entity_name(t.tail),
        )
    }

    /// Adds `(t, r^-1, h)` for every triple in every split and doubles the
    /// relation vocabulary. Inverse relation `r + |R_base|` is named
    /// `inverse of <name>`.
    pub fn augment_inverses(mut self) -> Result<Self> {
        if self.augmented {
            return Err(KgtError::AlreadyAugmented);
        }
        let n = self.base_relations;
        for i in 0..n {
            let name = inverse_relation_text(&self.relation_names[i]);
            if self.relation_index.contains_key(&name) {
                return Err(KgtError::Invalid(format!(
                    "relation name `{name}` collides with a generated inverse"
                )));
            }
            self.relation_index.insert(name.clone(), RelationId((n + i) as u32));
            self.relation_names.push(name);
        }
        self.augmented = true;
        for split in Split::ALL {
            let inv: Vec<Triple> = self.split(split).iter().map(|&t| self.invert(t)).collect();
            let list = match split {
                Split::Train => &mut self.train,
                Split::Valid => &mut self.valid,
                Split::Test => &mut self.test,
            };
            list.extend(inv);
        }
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterPolicy {
    TrainOnly,
    #[default]
    AllSplits,
}

impl std::str::FromStr for FilterPolicy {
    type Err = KgtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-only" => Ok(FilterPolicy::TrainOnly),
            "all-splits" => Ok(FilterPolicy::AllSplits),
            other => Err(KgtError::Invalid(format!(
                "unknown filter policy `{other}` (expected train-only or all-splits)"
            ))),
        }
    }
}

/// Known-true tails per `(head, relation)` query.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterIndex {
    known: HashMap<(EntityId, RelationId), BTreeSet<EntityId>>,
    policy: FilterPolicy,
}

impl FilterIndex {
    pub fn build(kg: &KnowledgeGraph, policy: FilterPolicy) -> Result<Self> {
        if !kg.is_augmented() {
            return Err(KgtError::NotAugmented);
        }
        let splits: &[Split] = match policy {
            FilterPolicy::TrainOnly => &[Split::Train],
            FilterPolicy::AllSplits => &Split::ALL,
        };
        let mut known: HashMap<(EntityId, RelationId), BTreeSet<EntityId>> = HashMap::new();
        for &s in splits {
            for t in kg.split(s) {
                known.entry((t.head, t.relation)).or_default().insert(t.tail);
            }
        }
        Ok(Self { known, policy })
    }

    pub fn policy(&self) -> FilterPolicy {
        self.policy
    }

    pub fn tails(&self, head: EntityId, relation: RelationId) -> Option<&BTreeSet<EntityId>> {
        self.known.get(&(head, relation))
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.tails(head, relation).is_some_and(|s| s.contains(&tail))
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    /// Stable `(head, relation, tail)` listing, sorted.
    pub fn entries(&self) -> Vec<Triple> {
        let mut out: Vec<Triple> = self
            .known
            .iter()
            .flat_map(|(&(h, r), tails)| tails.iter().map(move |&t| Triple::new(h, r, t)))
            .collect();
        out.sort();
        out
    }
}

pub fn build_filter_index(kg: &KnowledgeGraph, policy: FilterPolicy) -> Result<FilterIndex> {
    FilterIndex::build(kg, policy)
}
