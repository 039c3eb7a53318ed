//! Synthetic corpora: gazetteer-filled templates, an exact-match teacher,
//! LM-generated continuations labelled by that teacher, splits and JSONL files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{generate, DecodeParams, LanguageModel};
use crate::propagation::{decode_iob2, EntitySpan, EntityTypeSet, Label};
use crate::tokenizer::{split_words, Vocab};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Synthetic,
    Generated,
}

/// One labelled document. `labels` holds IOB2 strings aligned with `tokens`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDoc {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub origin: Origin,
    pub prompt_len: usize,
}

impl AnnotatedDoc {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn parsed_labels(&self, types: &EntityTypeSet) -> Result<Vec<Label>> {
        if self.labels.len() != self.tokens.len() {
            return Err(Error::InvalidLabel(format!(
                "{} labels for {} tokens",
                self.labels.len(),
                self.tokens.len()
            )));
        }
        self.labels.iter().map(|l| types.parse_label(l)).collect()
    }

    pub fn gold_spans(&self, types: &EntityTypeSet) -> Result<Vec<EntitySpan>> {
        Ok(decode_iob2(&self.parsed_labels(types)?))
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

const DEFAULT_TEMPLATES: &[&str] = &[
    "{PERSON} was born in {GPE} .",
    "{PERSON} moved to {GPE} after the {EVENT} .",
    "the {ORG} sponsored the {EVENT} in {GPE} .",
    "{PERSON} wrote {WORK_OF_ART} while living in {GPE} .",
    "critics at the {ORG} praised {WORK_OF_ART} .",
    "{PERSON} joined the {ORG} last year .",
    "tickets for the {EVENT} sold out quickly .",
    "{PERSON} met {PERSON} at the {EVENT} .",
    "a new edition of {WORK_OF_ART} was published in {GPE} .",
    "the {ORG} opened an office in {GPE} .",
    "{PERSON} said that {WORK_OF_ART} changed everything .",
    "many visitors travel to {GPE} for the {EVENT} .",
    "{PERSON} performed {WORK_OF_ART} at the {EVENT} .",
    "reporters from the {ORG} interviewed {PERSON} .",
    "the mayor of {GPE} welcomed {PERSON} .",
    "{WORK_OF_ART} is still read in {GPE} today .",
    "after the {EVENT} , {PERSON} returned to {GPE} .",
    "the {ORG} criticized {PERSON} on monday .",
    "nobody expected {PERSON} to win the {EVENT} .",
    "{PERSON} donated money to the {ORG} .",
    "students in {GPE} study {WORK_OF_ART} .",
    "the {EVENT} attracted fans from {GPE} and {GPE} .",
    "{PERSON} bought a painting called {WORK_OF_ART} .",
    "it rained during the {EVENT} .",
    "the weather in {GPE} was cold .",
    "everyone agreed that the plan was good .",
    "{PERSON} and {PERSON} founded the {ORG} .",
    "people kept talking about {ANY} all week .",
    "a documentary about {ANY} was shown yesterday .",
    "the article mentioned {ANY} twice .",
    "nobody had heard of {ANY} before .",
    "{ANY} was in the news again .",
    "she wrote a long essay about {ANY} .",
    "the old photo showed {ANY} clearly .",
    "our guide talked about {ANY} for an hour .",
];

/// Slot filled with a mention of a uniformly drawn type, so the words before
/// it say nothing about the type.
const ANY_SLOT: &str = "ANY";

/// Per-type mention lexicons plus carrier-sentence templates with `{TYPE}`
/// slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gazetteer {
    lexicon: BTreeMap<String, Vec<String>>,
    templates: Vec<String>,
}

impl Gazetteer {
    pub fn new(lexicon: BTreeMap<String, Vec<String>>, templates: Vec<String>) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(Error::InvalidGazetteer("no entity types".into()));
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (ty, mentions) in &lexicon {
            if ty == ANY_SLOT {
                return Err(Error::InvalidGazetteer(format!("{ANY_SLOT} is a reserved slot name")));
            }
            EntityTypeSet::new([ty.clone()]).map_err(|_| Error::InvalidGazetteer(format!("bad type name {ty}")))?;
            if mentions.is_empty() {
                return Err(Error::InvalidGazetteer(format!("type {ty} has no mentions")));
            }
            if !mentions.iter().any(|m| split_words(m).len() > 1) {
                return Err(Error::InvalidGazetteer(format!("type {ty} has no multi-token mention")));
            }
            for m in mentions {
                if split_words(m).is_empty() {
                    return Err(Error::InvalidGazetteer(format!("empty mention for {ty}")));
                }
                if let Some(other) = seen.insert(m.as_str(), ty.as_str()) {
                    if other != ty {
                        return Err(Error::InvalidGazetteer(format!("`{m}` listed under {other} and {ty}")));
                    }
                }
            }
        }
        let g = Gazetteer { lexicon, templates };
        if g.usable_templates().is_empty() {
            return Err(Error::InvalidGazetteer("no template uses only known types".into()));
        }
        Ok(g)
    }

    /// Built-in lexicon with shared prefixes across types.
    pub fn builtin() -> Self {
        let lex: &[(&str, &[&str])] = &[
            (
                "EVENT",
                &[
                    "New York Film Festival", "Berlin Marathon", "Tokyo Olympics", "World Cup",
                    "Paris Air Show", "Cannes Film Festival", "Glastonbury", "Oktoberfest", "Super Bowl",
                    "Live Aid", "Venice Biennale", "London Marathon", "Carnival", "Boston Tea Party",
                ],
            ),
            (
                "GPE",
                &[
                    "Paris", "London", "Berlin", "Tokyo", "Madrid", "Cairo", "Lima", "Oslo", "Boston",
                    "New York", "New Delhi", "San Francisco", "Buenos Aires", "Rio de Janeiro", "Hong Kong",
                    "Cape Town", "Mexico City", "Venice",
                ],
            ),
            (
                "ORG",
                &[
                    "New York Times", "Berlin Philharmonic", "Tokyo Electric", "United Nations", "Red Cross",
                    "Google", "Siemens", "Toyota", "World Bank", "London Symphony Orchestra",
                    "Paris Saint Germain", "Real Madrid", "Nokia", "Oxford University",
                    "Amnesty International", "Boston Dynamics",
                ],
            ),
            (
                "PERSON",
                &[
                    "Paris Hilton", "Paul Atreides", "Marie Curie", "Alan Turing", "Ada Lovelace",
                    "Frida Kahlo", "Nelson Mandela", "Leo Tolstoy", "Jane Austen", "Tom Hanks",
                    "Greta Thunberg", "Lionel Messi", "Serena Williams", "Homer", "Plato", "Madonna",
                ],
            ),
            (
                "WORK_OF_ART",
                &[
                    "Dune", "Hamlet", "Mona Lisa", "War and Peace", "Pride and Prejudice",
                    "The Starry Night", "Don Quixote", "Guernica", "Moby Dick", "The Godfather",
                    "Casablanca", "Thriller", "Bolero", "The Odyssey", "Tokyo Story",
                ],
            ),
        ];
        let lexicon = lex
            .iter()
            .map(|(t, ms)| (t.to_string(), ms.iter().map(|m| m.to_string()).collect()))
            .collect();
        Gazetteer::new(lexicon, DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect())
            .expect("builtin gazetteer is valid")
    }

    /// Reads `{type: [mentions]}`; templates are the built-in set.
    pub fn from_json(text: &str) -> Result<Self> {
        let lexicon: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        Gazetteer::new(lexicon, DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.lexicon).expect("lexicon serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Gazetteer::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn types(&self) -> EntityTypeSet {
        EntityTypeSet::new(self.lexicon.keys().cloned()).expect("validated on construction")
    }

    pub fn lexicon(&self) -> &BTreeMap<String, Vec<String>> {
        &self.lexicon
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        for t in &self.templates {
            h.update(t.as_bytes());
            h.update([0]);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn usable_templates(&self) -> Vec<&str> {
        self.templates
            .iter()
            .filter(|t| template_slots(t).iter().all(|s| s == ANY_SLOT || self.lexicon.contains_key(s)))
            .map(String::as_str)
            .collect()
    }

    /// Every piece that can appear in synthetic text.
    pub fn vocab(&self) -> Vocab {
        let mut words = BTreeSet::new();
        for t in &self.templates {
            for w in split_words(t) {
                if !(w.starts_with('{') && w.ends_with('}')) {
                    words.insert(w);
                }
            }
        }
        for ms in self.lexicon.values() {
            for m in ms {
                words.extend(split_words(m));
            }
        }
        Vocab::from_words(words)
    }

    fn patterns(&self) -> Vec<(Vec<String>, usize)> {
        let types = self.types();
        let mut pats = Vec::new();
        for (ty, ms) in &self.lexicon {
            let t = types.id(ty).expect("own type");
            for m in ms {
                pats.push((split_words(m), t));
            }
        }
        pats
    }
}

fn template_slots(t: &str) -> Vec<String> {
    split_words(t)
        .into_iter()
        .filter_map(|w| w.strip_prefix('{').and_then(|w| w.strip_suffix('}')).map(str::to_string))
        .collect()
}

/// Exact lexicon tagging: among all matches the longest wins, ties go to the
/// leftmost, and selected matches never overlap.
pub fn oracle_annotate(tokens: &[String], gazetteer: &Gazetteer) -> Vec<Label> {
    let mut matches = Vec::new();
    for (pat, t) in gazetteer.patterns() {
        if pat.len() > tokens.len() {
            continue;
        }
        for s in 0..=tokens.len() - pat.len() {
            if tokens[s..s + pat.len()] == pat[..] {
                matches.push((s, pat.len(), t));
            }
        }
    }
    matches.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut labels = vec![Label::O; tokens.len()];
    let mut taken = vec![false; tokens.len()];
    for (s, len, t) in matches {
        if taken[s..s + len].iter().any(|&x| x) {
            continue;
        }
        labels[s] = Label::B(t);
        for k in s..s + len {
            taken[k] = true;
            if k > s {
                labels[k] = Label::I(t);
            }
        }
    }
    labels
}

fn label_strings(labels: &[Label], types: &EntityTypeSet) -> Vec<String> {
    labels.iter().map(|&l| types.label_name(l)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_docs: usize,
    pub seed: u64,
    pub min_sentences: usize,
    pub max_sentences: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { n_docs: 1000, seed: 0, min_sentences: 2, max_sentences: 4 }
    }
}

fn synth_doc(g: &Gazetteer, templates: &[&str], p: &SynthParams, rng: &mut ChaCha8Rng) -> AnnotatedDoc {
    let types = g.types();
    let n_sent = rng.random_range(p.min_sentences.max(1)..=p.max_sentences.max(p.min_sentences.max(1)));
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n_sent {
        let tpl = templates.choose(rng).expect("non-empty");
        for w in split_words(tpl) {
            match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                Some(slot) => {
                    let ty = if slot == ANY_SLOT {
                        types.names()[rng.random_range(0..types.len())].as_str()
                    } else {
                        slot
                    };
                    let t = types.id(ty).expect("usable template");
                    let mention = g.lexicon[ty].choose(rng).expect("non-empty");
                    for (k, piece) in split_words(mention).into_iter().enumerate() {
                        tokens.push(piece);
                        labels.push(if k == 0 { Label::B(t) } else { Label::I(t) });
                    }
                }
                None => {
                    tokens.push(w);
                    labels.push(Label::O);
                }
            }
        }
    }
    AnnotatedDoc { labels: label_strings(&labels, &types), tokens, origin: Origin::Synthetic, prompt_len: 0 }
}

/// Template-filled documents labelled by mention placement. Deterministic.
pub fn synth_corpus(gazetteer: &Gazetteer, params: &SynthParams) -> Vec<AnnotatedDoc> {
    let templates = gazetteer.usable_templates();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..params.n_docs).map(|_| synth_doc(gazetteer, &templates, params, &mut rng)).collect()
}

/// First `n_sentences` sentences of `doc`, usable as a generation prompt.
pub fn prompt_from(doc: &AnnotatedDoc, n_sentences: usize) -> AnnotatedDoc {
    let mut cut = doc.len();
    let mut seen = 0;
    for (i, t) in doc.tokens.iter().enumerate() {
        if t == "." {
            seen += 1;
            if seen == n_sentences {
                cut = i + 1;
                break;
            }
        }
    }
    AnnotatedDoc {
        tokens: doc.tokens[..cut].to_vec(),
        labels: doc.labels[..cut].to_vec(),
        origin: doc.origin,
        prompt_len: 0,
    }
}

/// Continues each prompt with the LM and labels prompt plus continuation with
/// the teacher; `prompt_len` marks where generation starts.
pub fn distill_generate(
    model: &LanguageModel,
    prompts: &[AnnotatedDoc],
    decode: &DecodeParams,
    teacher: &Gazetteer,
    exec: Exec,
) -> Result<Vec<AnnotatedDoc>> {
    decode.validate()?;
    let types = teacher.types();
    exec.try_map(prompts, |p| {
        let ids = model.vocab.ids_strict(&p.tokens)?;
        let new = generate(&model.weights, &ids, decode)?;
        let mut tokens = p.tokens.clone();
        tokens.extend(new.iter().map(|&t| model.vocab.piece(t).to_string()));
        let labels = oracle_annotate(&tokens, teacher);
        Ok(AnnotatedDoc {
            labels: label_strings(&labels, &types),
            tokens,
            origin: Origin::Generated,
            prompt_len: p.len(),
        })
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<AnnotatedDoc>,
    pub dev: Vec<AnnotatedDoc>,
    pub test: Vec<AnnotatedDoc>,
}

/// Enough to rebuild a synthetic dataset and its splits exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub synth: SynthParams,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    pub split_sizes: [usize; 3],
    pub gazetteer_hash: String,
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn regenerate(&self, gazetteer: &Gazetteer) -> Result<Splits> {
        if gazetteer.hash() != self.gazetteer_hash {
            return Err(Error::ConfigMismatch("gazetteer differs from manifest".into()));
        }
        let docs = synth_corpus(gazetteer, &self.synth);
        let (splits, _) = split_dataset(docs, self.ratios, self.split_seed)?;
        Ok(splits)
    }
}

pub fn splits_hash(s: &Splits) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(s).expect("docs serialize"));
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded shuffle, then consecutive slices sized by `ratios`.
pub fn split_dataset(mut docs: Vec<AnnotatedDoc>, ratios: [f64; 3], seed: u64) -> Result<(Splits, [usize; 3])> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!("ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let n = docs.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_dev = ((n as f64 * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_dev);
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(Error::InvalidSplit(format!("{n} documents give sizes {n_train}/{n_dev}/{n_test}")));
    }
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = docs.split_off(n_train + n_dev);
    let dev = docs.split_off(n_train);
    Ok((Splits { train: docs, dev, test }, [n_train, n_dev, n_test]))
}

/// Builds the synthetic corpus, splits it and records a manifest.
pub fn build_dataset(gazetteer: &Gazetteer, synth: &SynthParams, ratios: [f64; 3], split_seed: u64) -> Result<(Splits, DatasetManifest)> {
    if synth.n_docs == 0 {
        return Err(Error::EmptyCorpus);
    }
    let (splits, sizes) = split_dataset(synth_corpus(gazetteer, synth), ratios, split_seed)?;
    let manifest = DatasetManifest {
        synth: synth.clone(),
        ratios,
        split_seed,
        split_sizes: sizes,
        gazetteer_hash: gazetteer.hash(),
        content_hash: splits_hash(&splits),
    };
    Ok((splits, manifest))
}

pub fn write_jsonl(path: &Path, docs: &[AnnotatedDoc]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AnnotatedDoc>> {
    let mut docs = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            docs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn toks(s: &str) -> Vec<String> {
        split_words(s)
    }

    #[test]
    fn builtin_gazetteer_is_disjoint_and_typed() {
        let g = Gazetteer::builtin();
        assert_eq!(g.types().names(), ["EVENT", "GPE", "ORG", "PERSON", "WORK_OF_ART"]);
        let mut bad = g.lexicon().clone();
        bad.get_mut("ORG").unwrap().push("Paris".into());
        assert!(Gazetteer::new(bad, DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect()).is_err());
        let mut reserved = g.lexicon().clone();
        reserved.insert("ANY".into(), vec!["Big Thing".into()]);
        assert!(Gazetteer::new(reserved, DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect()).is_err());
        assert!(Gazetteer::from_json("{}").is_err());
        assert!(Gazetteer::from_json(r#"{"PER": ["Ann"]}"#).is_err());
        assert_eq!(Gazetteer::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn synthetic_docs_are_valid_and_seeded() {
        let g = Gazetteer::builtin();
        let p = SynthParams { n_docs: 100, seed: 3, ..Default::default() };
        let docs = synth_corpus(&g, &p);
        assert_eq!(docs.len(), 100);
        assert_eq!(docs, synth_corpus(&g, &p));
        let types = g.types();
        let mut mentions = 0;
        let mut multi = 0;
        for d in &docs {
            let labels = d.parsed_labels(&types).unwrap();
            // placement labels agree with the teacher
            assert_eq!(oracle_annotate(&d.tokens, &g), labels);
            for s in decode_iob2(&labels) {
                mentions += 1;
                multi += usize::from(s.end > s.start);
            }
        }
        assert!(multi * 5 >= mentions, "{multi} multi-token of {mentions}");
    }

    #[test]
    fn any_slots_draw_every_type() {
        let g = Gazetteer::builtin();
        let types = g.types();
        let docs = synth_corpus(&g, &SynthParams { n_docs: 400, ..Default::default() });
        let mut seen = BTreeSet::new();
        for d in &docs {
            let labels = d.parsed_labels(&types).unwrap();
            for w in 0..d.len().saturating_sub(1) {
                // "nobody had heard of {ANY} before ."
                if d.tokens[w] == "of" && w >= 2 && d.tokens[w - 1] == "heard" {
                    if let Label::B(t) = labels[w + 1] {
                        seen.insert(t);
                    }
                }
            }
        }
        assert_eq!(seen.len(), types.len());
    }

    #[test]
    fn oracle_prefers_longest_then_leftmost() {
        let g = Gazetteer::builtin();
        let types = g.types();
        let l = oracle_annotate(&toks("we saw the New York Film Festival ."), &g);
        let ev = types.id("EVENT").unwrap();
        assert_eq!(&l[3..7], &[Label::B(ev), Label::I(ev), Label::I(ev), Label::I(ev)]);
        let per = types.id("PERSON").unwrap();
        assert_eq!(oracle_annotate(&toks("Paris Hilton"), &g), vec![Label::B(per), Label::I(per)]);
        assert!(oracle_annotate(&toks("nothing here ."), &g).iter().all(|&l| l == Label::O));
        // "Tokyo Story" vs "Tokyo Olympics" do not overlap; both tagged
        let l = oracle_annotate(&toks("Tokyo Story Tokyo Olympics"), &g);
        assert_eq!(decode_iob2(&l).len(), 2);
    }

    #[test]
    fn splits_are_disjoint_and_replayable() {
        let g = Gazetteer::builtin();
        let synth = SynthParams { n_docs: 100, seed: 1, ..Default::default() };
        let (s, m) = build_dataset(&g, &synth, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (80, 10, 10));
        assert_eq!(m.regenerate(&g).unwrap(), s);
        assert_eq!(splits_hash(&m.regenerate(&g).unwrap()), m.content_hash);
        assert!(split_dataset(vec![], [0.8, 0.1, 0.1], 0).is_err());
        assert!(split_dataset(synth_corpus(&g, &synth), [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let g = Gazetteer::builtin();
        let docs = synth_corpus(&g, &SynthParams { n_docs: 5, ..Default::default() });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &docs).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), docs);
    }

    #[test]
    fn distillation_records_prompt_length() {
        let g = Gazetteer::builtin();
        let vocab = g.vocab();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: vocab.len(),
            max_context: 64,
            seed: 1,
        };
        let lm = LanguageModel::new(init_model(&cfg).unwrap(), vocab).unwrap();
        let docs = synth_corpus(&g, &SynthParams { n_docs: 4, ..Default::default() });
        let prompts: Vec<_> = docs.iter().map(|d| prompt_from(d, 1)).collect();
        let params = DecodeParams { max_new_tokens: 10, ..Default::default() };
        let out = distill_generate(&lm, &prompts, &params, &g, Exec::Sequential).unwrap();
        for (o, p) in out.iter().zip(&prompts) {
            assert_eq!(o.prompt_len, p.len());
            assert_eq!(o.len(), p.len() + 10);
            assert_eq!(o.origin, Origin::Generated);
            assert_eq!(&o.tokens[..p.len()], &p.tokens[..]);
        }
    }
}
