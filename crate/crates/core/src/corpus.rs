//! Labeled lyric corpora: ingestion, validation, persistence, stratified
//! splitting and a synthetic generator.
//!
//! A corpus file is UTF-8 with one JSON object per line:
//!
//! ```text
//! {"schema":1,"id":"s1","title":"..","artist":"..","genre":"reggaeton",
//!  "lyrics":"..","label":"explicit","phrases":[{"text":"..","type":"slang"}]}
//! ```
//!
//! `schema` is mandatory and must be `1`. Blank lines are ignored.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::write_atomic;
use crate::text::normalize;

pub const CORPUS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Genre {
    Reggaeton,
    Trap,
    Other,
}

/// Binary expert label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Explicit,
    NonExplicit,
}

impl Label {
    pub fn from_explicit(explicit: bool) -> Self {
        if explicit {
            Label::Explicit
        } else {
            Label::NonExplicit
        }
    }

    pub fn is_explicit(self) -> bool {
        self == Label::Explicit
    }

    /// Training target: 1.0 for explicit, 0.0 otherwise.
    pub fn target(self) -> f64 {
        if self.is_explicit() {
            1.0
        } else {
            0.0
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Explicit => "explicit",
            Label::NonExplicit => "non_explicit",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How an explicit phrase conveys its meaning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceType {
    Direct,
    Metaphorical,
    Slang,
    Implicit,
    Objectification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    #[serde(rename = "type")]
    pub reference_type: ReferenceType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Song {
    pub id: String,
    pub title: String,
    pub artist: String,
    pub genre: Genre,
    pub lyrics: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub song_id: String,
    pub label: Label,
    pub phrases: Vec<Phrase>,
}

/// Wire form of one corpus line.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    schema: u32,
    id: String,
    title: String,
    artist: String,
    genre: Genre,
    lyrics: String,
    label: Label,
    #[serde(default)]
    phrases: Vec<Phrase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("unsupported schema version {0}")]
    Schema(u32),
    #[error("duplicate song id {0:?}")]
    DuplicateId(String),
    #[error("lyrics are empty after normalization")]
    EmptyLyrics,
    #[error("explicit song has no reference phrases")]
    MissingPhrases,
    #[error("non-explicit song carries reference phrases")]
    UnexpectedPhrases,
    #[error("phrase {0:?} does not occur in the normalized lyrics")]
    PhraseNotInLyrics(String),
}

/// A record-level failure with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct LineError {
    pub line: usize,
    pub reason: RecordError,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Line(#[from] LineError),
    #[error("invalid corpus: {0}")]
    Invalid(RecordError),
    #[error("not enough {label} songs: need {needed}, have {available}")]
    Insufficient {
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("unknown song id {0:?}")]
    UnknownSong(String),
}

/// Validate the song/annotation pair invariants.
pub fn validate_pair(song: &Song, annotation: &Annotation) -> Result<(), RecordError> {
    let lyrics = normalize(&song.lyrics);
    if lyrics.is_empty() {
        return Err(RecordError::EmptyLyrics);
    }
    match (annotation.label, annotation.phrases.is_empty()) {
        (Label::Explicit, true) => return Err(RecordError::MissingPhrases),
        (Label::NonExplicit, false) => return Err(RecordError::UnexpectedPhrases),
        _ => {}
    }
    for phrase in &annotation.phrases {
        let p = normalize(&phrase.text);
        if p.is_empty() || !lyrics.contains(&p) {
            return Err(RecordError::PhraseNotInLyrics(phrase.text.clone()));
        }
    }
    Ok(())
}

/// Result of a lenient load: everything that parsed plus per-line errors.
#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub songs: Vec<Song>,
    pub annotations: Vec<Annotation>,
    pub errors: Vec<LineError>,
}

/// Parse a corpus from any buffered reader.
///
/// With `strict` the first bad line aborts the load; otherwise bad lines are
/// collected in [`LoadOutcome::errors`] and skipped.
pub fn read_corpus<R: BufRead>(reader: R, strict: bool) -> Result<LoadOutcome, CorpusError> {
    let mut out = LoadOutcome::default();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, &seen) {
            Ok((song, annotation)) => {
                seen.insert(song.id.clone());
                out.songs.push(song);
                out.annotations.push(annotation);
            }
            Err(reason) => {
                let err = LineError {
                    line: idx + 1,
                    reason,
                };
                if strict {
                    return Err(err.into());
                }
                out.errors.push(err);
            }
        }
    }
    Ok(out)
}

fn parse_line(line: &str, seen: &BTreeSet<String>) -> Result<(Song, Annotation), RecordError> {
    // Check the schema before the full parse so a version mismatch is
    // reported as such rather than as a missing field.
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| RecordError::Malformed(e.to_string()))?;
    match value.get("schema").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(CORPUS_SCHEMA) => {}
        Some(v) => return Err(RecordError::Schema(v as u32)),
        None => return Err(RecordError::Malformed("missing \"schema\" field".into())),
    }
    let rec: Record =
        serde_json::from_value(value).map_err(|e| RecordError::Malformed(e.to_string()))?;
    if rec.id.is_empty() {
        return Err(RecordError::Malformed("empty id".into()));
    }
    if seen.contains(&rec.id) {
        return Err(RecordError::DuplicateId(rec.id));
    }
    let song = Song {
        id: rec.id.clone(),
        title: rec.title,
        artist: rec.artist,
        genre: rec.genre,
        lyrics: rec.lyrics,
    };
    let annotation = Annotation {
        song_id: rec.id,
        label: rec.label,
        phrases: rec.phrases,
    };
    validate_pair(&song, &annotation)?;
    Ok((song, annotation))
}

/// Load a corpus file. See [`read_corpus`] for `strict`.
pub fn load_corpus(path: impl AsRef<Path>, strict: bool) -> Result<LoadOutcome, CorpusError> {
    let file = File::open(path)?;
    read_corpus(BufReader::new(file), strict)
}

/// Serialize songs and their annotations, one record per line.
pub fn write_corpus<W: Write>(
    mut w: W,
    songs: &[Song],
    annotations: &[Annotation],
) -> Result<(), CorpusError> {
    let by_id: HashMap<&str, &Annotation> =
        annotations.iter().map(|a| (a.song_id.as_str(), a)).collect();
    for song in songs {
        let ann = by_id
            .get(song.id.as_str())
            .ok_or_else(|| CorpusError::UnknownSong(song.id.clone()))?;
        let rec = Record {
            schema: CORPUS_SCHEMA,
            id: song.id.clone(),
            title: song.title.clone(),
            artist: song.artist.clone(),
            genre: song.genre,
            lyrics: song.lyrics.clone(),
            label: ann.label,
            phrases: ann.phrases.clone(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Atomically write a corpus file.
pub fn save_corpus(
    path: impl AsRef<Path>,
    songs: &[Song],
    annotations: &[Annotation],
) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, songs, annotations)?;
    write_atomic(path.as_ref(), &buf)?;
    Ok(())
}

/// A song together with its annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSong {
    pub song: Song,
    pub annotation: Annotation,
}

impl LabeledSong {
    pub fn id(&self) -> &str {
        &self.song.id
    }

    pub fn label(&self) -> Label {
        self.annotation.label
    }
}

/// An immutable, validated corpus indexed by song id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    items: Vec<LabeledSong>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Pair songs with annotations by id and validate every invariant.
    pub fn new(songs: Vec<Song>, annotations: Vec<Annotation>) -> Result<Self, CorpusError> {
        let mut anns: HashMap<String, Annotation> = HashMap::with_capacity(annotations.len());
        for a in annotations {
            if anns.contains_key(&a.song_id) {
                return Err(CorpusError::Invalid(RecordError::DuplicateId(a.song_id)));
            }
            anns.insert(a.song_id.clone(), a);
        }
        let mut items = Vec::with_capacity(songs.len());
        let mut index = HashMap::with_capacity(songs.len());
        for song in songs {
            if index.contains_key(&song.id) {
                return Err(CorpusError::Invalid(RecordError::DuplicateId(song.id)));
            }
            let annotation = anns
                .remove(&song.id)
                .ok_or_else(|| CorpusError::UnknownSong(song.id.clone()))?;
            validate_pair(&song, &annotation).map_err(CorpusError::Invalid)?;
            index.insert(song.id.clone(), items.len());
            items.push(LabeledSong { song, annotation });
        }
        if let Some(orphan) = anns.into_keys().next() {
            return Err(CorpusError::UnknownSong(orphan));
        }
        Ok(Corpus { items, index })
    }

    pub fn from_outcome(outcome: LoadOutcome) -> Result<Self, CorpusError> {
        Corpus::new(outcome.songs, outcome.annotations)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledSong> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn items(&self) -> &[LabeledSong] {
        &self.items
    }

    pub fn songs(&self) -> impl Iterator<Item = &Song> {
        self.items.iter().map(|i| &i.song)
    }

    /// Resolve a list of ids to labeled songs, failing on the first unknown id.
    pub fn select(&self, ids: &[String]) -> Result<Vec<LabeledSong>, CorpusError> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| CorpusError::UnknownSong(id.clone()))
            })
            .collect()
    }

    pub fn into_parts(self) -> (Vec<Song>, Vec<Annotation>) {
        self.items
            .into_iter()
            .map(|i| (i.song, i.annotation))
            .unzip()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let (songs, anns): (Vec<Song>, Vec<Annotation>) = self
            .items
            .iter()
            .map(|i| (i.song.clone(), i.annotation.clone()))
            .unzip();
        save_corpus(path, &songs, &anns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    EvalPre,
    EvalPost,
    Comparison,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::EvalPre,
        SplitName::EvalPost,
        SplitName::Comparison,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::EvalPre => "eval_pre",
            SplitName::EvalPost => "eval_post",
            SplitName::Comparison => "comparison",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub explicit: usize,
    pub non_explicit: usize,
}

impl ClassCounts {
    pub fn new(explicit: usize, non_explicit: usize) -> Self {
        ClassCounts {
            explicit,
            non_explicit,
        }
    }

    /// Split a total evenly; an odd remainder goes to the non-explicit class.
    pub fn balanced(total: usize) -> Self {
        ClassCounts::new(total / 2, total - total / 2)
    }

    pub fn total(&self) -> usize {
        self.explicit + self.non_explicit
    }
}

/// Requested class counts for each of the four protocol splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: ClassCounts,
    pub eval_pre: ClassCounts,
    pub eval_post: ClassCounts,
    pub comparison: ClassCounts,
}

impl SplitSizes {
    /// Stratified halves of each total; the comparison mix is still a
    /// parameter through the explicit constructor.
    pub fn from_totals(train: usize, eval_pre: usize, eval_post: usize, comparison: usize) -> Self {
        SplitSizes {
            train: ClassCounts::balanced(train),
            eval_pre: ClassCounts::balanced(eval_pre),
            eval_post: ClassCounts::balanced(eval_post),
            comparison: ClassCounts::balanced(comparison),
        }
    }

    /// The protocol sizes: 100 train, 30 + 30 evaluation, 50 comparison.
    pub fn protocol() -> Self {
        SplitSizes::from_totals(100, 30, 30, 50)
    }

    fn get(&self, name: SplitName) -> ClassCounts {
        match name {
            SplitName::Train => self.train,
            SplitName::EvalPre => self.eval_pre,
            SplitName::EvalPost => self.eval_post,
            SplitName::Comparison => self.comparison,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub members: Vec<String>,
    pub class_counts: ClassCounts,
}

/// Partition a corpus into the four disjoint, stratified protocol splits.
///
/// Candidates of each class are sorted by id and then shuffled with a
/// ChaCha stream seeded from `seed`, so membership is reproducible across
/// platforms.
pub fn make_splits(
    corpus: &Corpus,
    sizes: &SplitSizes,
    seed: u64,
) -> Result<Vec<DatasetSplit>, CorpusError> {
    let mut explicit: Vec<&str> = Vec::new();
    let mut clean: Vec<&str> = Vec::new();
    for item in corpus.items() {
        match item.label() {
            Label::Explicit => explicit.push(item.id()),
            Label::NonExplicit => clean.push(item.id()),
        }
    }
    let need_e: usize = SplitName::ALL.iter().map(|&n| sizes.get(n).explicit).sum();
    let need_c: usize = SplitName::ALL.iter().map(|&n| sizes.get(n).non_explicit).sum();
    if need_e > explicit.len() {
        return Err(CorpusError::Insufficient {
            label: Label::Explicit,
            needed: need_e,
            available: explicit.len(),
        });
    }
    if need_c > clean.len() {
        return Err(CorpusError::Insufficient {
            label: Label::NonExplicit,
            needed: need_c,
            available: clean.len(),
        });
    }
    explicit.sort_unstable();
    clean.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    explicit.shuffle(&mut rng);
    clean.shuffle(&mut rng);

    let (mut e_at, mut c_at) = (0, 0);
    let mut splits = Vec::with_capacity(4);
    for name in SplitName::ALL {
        let want = sizes.get(name);
        let mut members: Vec<String> = explicit[e_at..e_at + want.explicit]
            .iter()
            .chain(&clean[c_at..c_at + want.non_explicit])
            .map(|s| s.to_string())
            .collect();
        e_at += want.explicit;
        c_at += want.non_explicit;
        members.shuffle(&mut rng);
        splits.push(DatasetSplit {
            name,
            members,
            class_counts: want,
        });
    }
    Ok(splits)
}

/// Knobs for [`generate_synthetic_corpus_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub n_explicit: usize,
    pub n_clean: usize,
    pub seed: u64,
    /// Prefix of generated ids; distinct prefixes give disjoint corpora.
    pub id_prefix: String,
    /// Probability that an explicit song carries the benign marker line.
    pub marker_rate_explicit: f64,
    /// Probability that a clean song carries the benign marker line.
    pub marker_rate_clean: f64,
}

impl SyntheticOptions {
    pub fn new(n_explicit: usize, n_clean: usize, seed: u64) -> Self {
        SyntheticOptions {
            n_explicit,
            n_clean,
            seed,
            id_prefix: "syn".into(),
            marker_rate_explicit: 0.0,
            marker_rate_clean: 0.0,
        }
    }
}

/// Explicit phrase bank, one group per reference type.
pub const PHRASE_BANK: &[(ReferenceType, &[&str])] = &[
    (
        ReferenceType::Direct,
        &[
            "hacemos el amor hasta el amanecer",
            "te quiero desnuda en mi cama",
            "toda la noche sudando en la cama",
        ],
    ),
    (
        ReferenceType::Metaphorical,
        &[
            "te vo'a dar hasta que salga el sol",
            "tu cuerpo es fuego y yo me quemo",
            "vamos a romper la cama otra vez",
        ],
    ),
    (
        ReferenceType::Slang,
        &[
            "te gusta el bellaqueo",
            "perreo intenso contra la pared",
            "esta noche toca bellaquear",
        ],
    ),
    (
        ReferenceType::Implicit,
        &[
            "me sé tus poses favoritas",
            "me susurras al oído y sube la temperatura",
            "lo que hicimos no se cuenta",
        ],
    ),
    (
        ReferenceType::Objectification,
        &[
            "mamacita ese booty no se puede ocultar",
            "ese cuerpo es un pecado",
            "tú eres mi gata en celo",
        ],
    ),
];

/// Lines characteristic of clean songs.
pub const BENIGN_BANK: &[&str] = &[
    "extraño a mi abuela en el barrio",
    "bailamos con la familia en navidad",
    "la playa y el sol de mi tierra",
    "sigo luchando por mis sueños",
    "mi madre me enseñó a trabajar",
    "cantamos con los panas en la esquina",
    "el corazón late por mi bandera",
    "la lluvia cae sobre la ciudad",
    "recuerdo la escuela y los amigos",
    "gracias a dios por un día más",
    "viajamos juntos por la carretera",
    "mi hermano chiquito aprende a leer",
];

/// Lines shared by both classes.
pub const FILLER_BANK: &[&str] = &[
    "dale que la noche es joven",
    "suena la música en la disco",
    "el dj pone el ritmo",
    "todos en la pista levantan las manos",
    "yeah yeah",
    "esto es de verdad",
    "desde puerto rico hasta madrid",
    "prende la luz que llegamos",
    "uno dos tres vamos",
    "baila baila sin parar",
];

/// Benign ad-lib used to plant a spurious correlation (see
/// [`SyntheticOptions::marker_rate_explicit`]).
pub const MARKER_LINE: &str = "dímelo flow con la gorra nueva";

const TITLE_WORDS: &[&str] = &[
    "noche", "fuego", "barrio", "luna", "calle", "ritmo", "sueño", "mar", "verano", "ciudad",
];

/// Generate a synthetic corpus with `n_explicit` explicit and `n_clean` clean
/// songs, deterministically from `seed`.
pub fn generate_synthetic_corpus(
    n_explicit: usize,
    n_clean: usize,
    seed: u64,
) -> (Vec<Song>, Vec<Annotation>) {
    generate_synthetic_corpus_with(&SyntheticOptions::new(n_explicit, n_clean, seed))
}

pub fn generate_synthetic_corpus_with(opts: &SyntheticOptions) -> (Vec<Song>, Vec<Annotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let total = opts.n_explicit + opts.n_clean;
    let mut songs = Vec::with_capacity(total);
    let mut anns = Vec::with_capacity(total);
    for i in 0..total {
        let explicit = i < opts.n_explicit;
        let (tag, k) = if explicit {
            ('e', i)
        } else {
            ('c', i - opts.n_explicit)
        };
        let id = format!("{}-{tag}{k:04}", opts.id_prefix);
        let mut lines: Vec<String> = Vec::new();
        let mut phrases = Vec::new();
        let n_filler = rng.random_range(3..=5);
        for _ in 0..n_filler {
            lines.push(pick(&mut rng, FILLER_BANK).to_string());
        }
        if explicit {
            let n_phrases = rng.random_range(1..=2);
            for _ in 0..n_phrases {
                let (kind, bank) = PHRASE_BANK[rng.random_range(0..PHRASE_BANK.len())];
                let text = pick(&mut rng, bank);
                if !phrases.iter().any(|p: &Phrase| p.text == text) {
                    phrases.push(Phrase {
                        text: text.to_string(),
                        reference_type: kind,
                    });
                    lines.push(text.to_string());
                }
            }
            if rng.random_bool(0.3) {
                lines.push(pick(&mut rng, BENIGN_BANK).to_string());
            }
        } else {
            let n_benign = rng.random_range(1..=3);
            for _ in 0..n_benign {
                lines.push(pick(&mut rng, BENIGN_BANK).to_string());
            }
        }
        let marker_rate = if explicit {
            opts.marker_rate_explicit
        } else {
            opts.marker_rate_clean
        };
        if marker_rate > 0.0 && rng.random_bool(marker_rate.min(1.0)) {
            lines.push(MARKER_LINE.to_string());
        }
        lines.shuffle(&mut rng);
        let genre = if rng.random_bool(0.5) {
            Genre::Reggaeton
        } else {
            Genre::Trap
        };
        let title = format!(
            "{} {}",
            capitalize(pick(&mut rng, TITLE_WORDS)),
            pick(&mut rng, TITLE_WORDS)
        );
        songs.push(Song {
            id: id.clone(),
            title,
            artist: format!("Artista {}", rng.random_range(1..=40)),
            genre,
            lyrics: lines.join("\n"),
        });
        anns.push(Annotation {
            song_id: id,
            label: Label::from_explicit(explicit),
            phrases,
        });
    }
    (songs, anns)
}

fn pick<'a, R: Rng>(rng: &mut R, bank: &[&'a str]) -> &'a str {
    bank[rng.random_range(0..bank.len())]
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
