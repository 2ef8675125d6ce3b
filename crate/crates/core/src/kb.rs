//! Append-only knowledge base of declarative memories and similarity retrieval.
//!
//! Every DM carries two keys, the embeddings of its goal and working-memory
//! conditions. A query is the current goal plus the rendered working memory;
//! a DM scores `w_goal * cos(goal, key_goal) + w_wm * cos(wm, key_wm)`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedder::{cosine, EmbedError, Embedder, EmbedderConfig, EmbeddingVector};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("invalid draft #{index}: field `{field}` is empty")]
    EmptyField { index: usize, field: &'static str },
    #[error("unknown DM ids: {0:?}")]
    UnknownIds(Vec<String>),
    #[error("retrieval k must be at least 1")]
    InvalidK,
    #[error("query goal text is empty")]
    EmptyGoal,
    #[error("revision {requested} does not exist (latest is {latest})")]
    UnknownRevision { requested: u64, latest: u64 },
    #[error("embedder {found:?} does not match the knowledge base embedder {expected:?}")]
    EmbedderMismatch {
        expected: Box<EmbedderConfig>,
        found: Box<EmbedderConfig>,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmKind {
    Fact,
    PolicyCue,
}

impl fmt::Display for DmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DmKind::Fact => "fact",
            DmKind::PolicyCue => "policy_cue",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Teacher,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub author: Author,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compile_iteration: Option<u32>,
    /// Unix seconds.
    pub created_at: u64,
}

impl Provenance {
    pub fn human(created_at: u64) -> Self {
        Self {
            author: Author::Human,
            problem_id: None,
            compile_iteration: None,
            created_at,
        }
    }
}

/// A DM as submitted, before the knowledge base assigns an id and keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmDraft {
    pub kind: DmKind,
    pub description: String,
    pub goal_condition: String,
    pub wm_condition: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kc_tags: Vec<String>,
}

impl DmDraft {
    pub fn new(
        kind: DmKind,
        description: impl Into<String>,
        goal_condition: impl Into<String>,
        wm_condition: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            description: description.into(),
            goal_condition: goal_condition.into(),
            wm_condition: wm_condition.into(),
            kc_tags: Vec::new(),
        }
    }

    /// Name of the first empty required field, if any.
    pub fn empty_field(&self) -> Option<&'static str> {
        [
            ("description", &self.description),
            ("goal_condition", &self.goal_condition),
            ("wm_condition", &self.wm_condition),
        ]
        .into_iter()
        .find(|(_, v)| v.trim().is_empty())
        .map(|(name, _)| name)
    }

    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.kind.to_string().as_str(),
            &self.description,
            &self.goal_condition,
            &self.wm_condition,
        ] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DmId(String);

impl DmId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DmId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclarativeMemory {
    pub id: DmId,
    /// Position in the knowledge base, starting at 0. Ties in retrieval go to
    /// the lower sequence number.
    pub seq: u64,
    pub kind: DmKind,
    pub description: String,
    pub goal_condition: String,
    pub wm_condition: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kc_tags: Vec<String>,
    pub provenance: Provenance,
    pub key_goal: EmbeddingVector,
    pub key_wm: EmbeddingVector,
}

impl DeclarativeMemory {
    pub fn draft(&self) -> DmDraft {
        DmDraft {
            kind: self.kind,
            description: self.description.clone(),
            goal_condition: self.goal_condition.clone(),
            wm_condition: self.wm_condition.clone(),
            kc_tags: self.kc_tags.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub goal_text: String,
    pub wm_text: String,
}

impl RetrievalQuery {
    pub fn new(goal_text: impl Into<String>, wm_text: impl Into<String>) -> Result<Self, KbError> {
        let goal_text = goal_text.into();
        if goal_text.trim().is_empty() {
            return Err(KbError::EmptyGoal);
        }
        Ok(Self {
            goal_text,
            wm_text: wm_text.into(),
        })
    }

    /// Query for a goal and an ordered working memory (newline-joined).
    pub fn from_state<S: AsRef<str>>(goal: &str, wm: &[S]) -> Result<Self, KbError> {
        let wm_text = wm.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n");
        Self::new(goal, wm_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub goal: f64,
    pub wm: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { goal: 0.5, wm: 0.5 }
    }
}

/// One ranked retrieval hit with its score components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: DmId,
    pub score: f64,
    pub goal_similarity: f64,
    pub wm_similarity: f64,
}

#[derive(Debug, Clone, Copy)]
struct EmbeddedQuery<'q> {
    goal: &'q EmbeddingVector,
    wm: &'q EmbeddingVector,
}

fn score_embedded(
    dm: &DeclarativeMemory,
    q: EmbeddedQuery<'_>,
    weights: ScoreWeights,
) -> Result<(f64, f64, f64), EmbedError> {
    let g = cosine(q.goal, &dm.key_goal)?;
    let w = cosine(q.wm, &dm.key_wm)?;
    Ok((weights.goal * g + weights.wm * w, g, w))
}

/// Similarity score of one DM against a query.
pub fn score_dm(
    dm: &DeclarativeMemory,
    q: &RetrievalQuery,
    embedder: &dyn Embedder,
    weights: ScoreWeights,
) -> Result<f64, KbError> {
    let goal = embedder.embed(&q.goal_text)?;
    let wm = embedder.embed(&q.wm_text)?;
    Ok(score_embedded(dm, EmbeddedQuery { goal: &goal, wm: &wm }, weights)?.0)
}

/// Append-only DM store. Revision `r` is the prefix of DMs committed by the
/// first `r` append batches.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    embedder_config: EmbedderConfig,
    dms: Vec<DeclarativeMemory>,
    /// `commits[r - 1]` is the DM count after revision `r`.
    commits: Vec<usize>,
}

impl KnowledgeBase {
    pub fn new(embedder_config: EmbedderConfig) -> Self {
        Self {
            embedder_config,
            dms: Vec::new(),
            commits: Vec::new(),
        }
    }

    /// Reassembles a knowledge base from persisted parts. Callers are
    /// responsible for the commit boundaries being nondecreasing and ending at
    /// `dms.len()`.
    pub fn from_parts(
        embedder_config: EmbedderConfig,
        dms: Vec<DeclarativeMemory>,
        commits: Vec<usize>,
    ) -> Self {
        Self {
            embedder_config,
            dms,
            commits,
        }
    }

    pub fn embedder_config(&self) -> &EmbedderConfig {
        &self.embedder_config
    }

    pub fn revision(&self) -> u64 {
        self.commits.len() as u64
    }

    pub fn commits(&self) -> &[usize] {
        &self.commits
    }

    pub fn len(&self) -> usize {
        self.dms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dms.is_empty()
    }

    pub fn dms(&self) -> &[DeclarativeMemory] {
        &self.dms
    }

    pub fn get(&self, id: &DmId) -> Option<&DeclarativeMemory> {
        self.dms.iter().find(|dm| &dm.id == id)
    }

    /// Number of DMs visible at `revision`.
    pub fn size_at(&self, revision: u64) -> Result<usize, KbError> {
        match revision {
            0 => Ok(0),
            r if r <= self.revision() => Ok(self.commits[r as usize - 1]),
            r => Err(KbError::UnknownRevision {
                requested: r,
                latest: self.revision(),
            }),
        }
    }

    /// Appends a batch as one new revision. Nothing is committed unless every
    /// draft validates and embeds. An empty batch is a no-op.
    pub fn append_dms(
        &mut self,
        drafts: &[DmDraft],
        provenance: &Provenance,
        embedder: &dyn Embedder,
    ) -> Result<Vec<DmId>, KbError> {
        if drafts.is_empty() {
            return Ok(Vec::new());
        }
        if !self.embedder_config.compatible_with(embedder.config()) {
            return Err(KbError::EmbedderMismatch {
                expected: Box::new(self.embedder_config.clone()),
                found: Box::new(embedder.config().clone()),
            });
        }
        for (index, d) in drafts.iter().enumerate() {
            if let Some(field) = d.empty_field() {
                return Err(KbError::EmptyField { index, field });
            }
        }
        let mut texts = Vec::with_capacity(drafts.len() * 2);
        for d in drafts {
            texts.push(d.goal_condition.as_str());
            texts.push(d.wm_condition.as_str());
        }
        let keys = embedder.embed_batch(&texts)?;
        for k in &keys {
            if k.dimension() != self.embedder_config.dimension {
                return Err(EmbedError::DimensionMismatch {
                    expected: self.embedder_config.dimension,
                    found: k.dimension(),
                }
                .into());
            }
        }
        let mut keys = keys.into_iter();
        let mut ids = Vec::with_capacity(drafts.len());
        for d in drafts {
            let seq = self.dms.len() as u64;
            let id = DmId(format!("dm-{seq:06}-{}", d.content_hash()));
            let (key_goal, key_wm) = (keys.next().unwrap(), keys.next().unwrap());
            self.dms.push(DeclarativeMemory {
                id: id.clone(),
                seq,
                kind: d.kind,
                description: d.description.clone(),
                goal_condition: d.goal_condition.clone(),
                wm_condition: d.wm_condition.clone(),
                kc_tags: d.kc_tags.clone(),
                provenance: provenance.clone(),
                key_goal,
                key_wm,
            });
            ids.push(id);
        }
        self.commits.push(self.dms.len());
        Ok(ids)
    }

    /// An owned copy truncated to `revision`.
    pub fn at_revision(&self, revision: u64) -> Result<KnowledgeBase, KbError> {
        let end = self.size_at(revision)?;
        Ok(KnowledgeBase {
            embedder_config: self.embedder_config.clone(),
            dms: self.dms[..end].to_vec(),
            commits: self.commits[..revision as usize].to_vec(),
        })
    }

    /// The whole knowledge base at its latest revision.
    pub fn view(&self) -> KbView<'_> {
        KbView {
            kb: self,
            base_revision: self.revision(),
            end: self.dms.len(),
            removed: BTreeSet::new(),
        }
    }

    /// The knowledge base as it stood at `revision`.
    pub fn view_at(&self, revision: u64) -> Result<KbView<'_>, KbError> {
        Ok(KbView {
            kb: self,
            base_revision: revision,
            end: self.size_at(revision)?,
            removed: BTreeSet::new(),
        })
    }

    /// A read-only view with `removed` hidden. The knowledge base itself is untouched.
    pub fn ablation_view(&self, removed: &BTreeSet<DmId>) -> Result<KbView<'_>, KbError> {
        self.view().without(removed)
    }
}

/// Read-only window onto a knowledge base: a revision prefix, optionally with
/// some DMs masked out for ablation.
#[derive(Debug, Clone)]
pub struct KbView<'a> {
    kb: &'a KnowledgeBase,
    base_revision: u64,
    end: usize,
    removed: BTreeSet<DmId>,
}

impl<'a> KbView<'a> {
    pub fn without(&self, removed: &BTreeSet<DmId>) -> Result<KbView<'a>, KbError> {
        let unknown: Vec<String> = removed
            .iter()
            .filter(|id| !self.kb.dms[..self.end].iter().any(|dm| &dm.id == *id))
            .map(|id| id.0.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(KbError::UnknownIds(unknown));
        }
        let mut all = self.removed.clone();
        all.extend(removed.iter().cloned());
        Ok(KbView {
            kb: self.kb,
            base_revision: self.base_revision,
            end: self.end,
            removed: all,
        })
    }

    pub fn base_revision(&self) -> u64 {
        self.base_revision
    }

    pub fn is_ablation(&self) -> bool {
        !self.removed.is_empty()
    }

    pub fn removed(&self) -> &BTreeSet<DmId> {
        &self.removed
    }

    pub fn embedder_config(&self) -> &EmbedderConfig {
        self.kb.embedder_config()
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a DeclarativeMemory> + '_ {
        self.kb.dms[..self.end]
            .iter()
            .filter(move |dm| !self.removed.contains(&dm.id))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.iter().next().is_none()
    }

    pub fn get(&self, id: &DmId) -> Option<&'a DeclarativeMemory> {
        self.kb.dms[..self.end]
            .iter()
            .find(|dm| &dm.id == id && !self.removed.contains(id))
    }

    /// Top-`k` DMs by score, descending; ties go to the earlier DM.
    pub fn retrieve(
        &self,
        q: &RetrievalQuery,
        k: usize,
        embedder: &dyn Embedder,
        weights: ScoreWeights,
    ) -> Result<Vec<Retrieved>, KbError> {
        if k == 0 {
            return Err(KbError::InvalidK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let goal = embedder.embed(&q.goal_text)?;
        let wm = embedder.embed(&q.wm_text)?;
        let eq = EmbeddedQuery { goal: &goal, wm: &wm };
        let mut scored = Vec::with_capacity(self.end);
        for dm in self.iter() {
            let (score, g, w) = score_embedded(dm, eq, weights)?;
            scored.push((dm, score, g, w));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.seq.cmp(&b.0.seq))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(dm, score, g, w)| Retrieved {
                id: dm.id.clone(),
                score,
                goal_similarity: g,
                wm_similarity: w,
            })
            .collect())
    }
}
