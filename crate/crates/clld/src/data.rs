//! Corpus loading, hashed n-gram featurization, and batching.
//!
//! Corpus files are UTF-8, one `label<TAB>text` example per line, with
//! `#`-prefixed and blank lines ignored. Featurization hashes lowercase word
//! n-grams into a fixed-dimension vector with FNV-1a and L2-normalizes the
//! result, so the same text always maps to the same vector with no fitted
//! vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Domain, Matrix, RngState};

/// One labeled text instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text: String,
    pub label_id: usize,
}

/// Ordered set of distinct label names; a label's index is stable for a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if seen.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// JSON array of label names in index order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.names).expect("label names serialize")
    }
}

/// A split dataset over a fixed label space.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub label_space: LabelSpace,
}

struct ParsedLine {
    label: String,
    text: String,
    line_no: usize,
}

fn parse_tsv(path: &Path) -> Result<Vec<ParsedLine>> {
    let content = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut parsed = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let Some((label, text)) = raw.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "expected `label<TAB>text`, found no tab".into(),
            });
        };
        let label = label.trim();
        let text = text.trim();
        if label.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty label".into(),
            });
        }
        if text.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty text".into(),
            });
        }
        parsed.push(ParsedLine {
            label: label.to_string(),
            text: text.to_string(),
            line_no,
        });
    }
    if parsed.is_empty() {
        return Err(Error::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    Ok(parsed)
}

fn map_labels(
    parsed: Vec<ParsedLine>,
    path: &Path,
    label_space: Option<LabelSpace>,
) -> Result<(Vec<Example>, LabelSpace)> {
    match label_space {
        Some(space) => {
            let examples = parsed
                .into_iter()
                .map(|p| {
                    space
                        .index_of(&p.label)
                        .map(|label_id| Example {
                            text: p.text,
                            label_id,
                        })
                        .ok_or_else(|| Error::UnknownLabel {
                            path: path.to_path_buf(),
                            line: p.line_no,
                            label: p.label,
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((examples, space))
        }
        None => {
            // First-appearance order defines the label indices.
            let mut names: Vec<String> = Vec::new();
            let mut index: HashMap<String, usize> = HashMap::new();
            let examples = parsed
                .into_iter()
                .map(|p| {
                    let label_id = *index.entry(p.label.clone()).or_insert_with(|| {
                        names.push(p.label);
                        names.len() - 1
                    });
                    Example {
                        text: p.text,
                        label_id,
                    }
                })
                .collect();
            Ok((examples, LabelSpace::new(names)?))
        }
    }
}

/// Load one TSV file as a full corpus, splitting 80/10/10 by a deterministic
/// shuffle on seed 0.
pub fn load_tsv(path: impl AsRef<Path>, label_space: Option<LabelSpace>) -> Result<Corpus> {
    let path = path.as_ref();
    let (mut examples, label_space) = map_labels(parse_tsv(path)?, path, label_space)?;

    let mut rng = RngState::for_domain(0, Domain::Shuffle(0));
    rng.shuffle(&mut examples);
    let total = examples.len();
    let train_end = (total * 8) / 10;
    let val_end = train_end + (total - train_end) / 2;
    let test = examples.split_off(val_end);
    let validation = examples.split_off(train_end);
    Ok(Corpus {
        train: examples,
        validation,
        test,
        label_space,
    })
}

/// Load separate train/validation/test files. The label space is built from
/// the training file (unless given) and then fixed for the other two.
pub fn load_tsv_split(
    train_path: impl AsRef<Path>,
    val_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
    label_space: Option<LabelSpace>,
) -> Result<Corpus> {
    let train_path = train_path.as_ref();
    let (train, label_space) = map_labels(parse_tsv(train_path)?, train_path, label_space)?;
    let validation = load_examples(val_path, &label_space)?;
    let test = load_examples(test_path, &label_space)?;
    Ok(Corpus {
        train,
        validation,
        test,
        label_space,
    })
}

/// Load a TSV file against a fixed label space, without splitting.
pub fn load_examples(path: impl AsRef<Path>, label_space: &LabelSpace) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let (examples, _) = map_labels(parse_tsv(path)?, path, Some(label_space.clone()))?;
    Ok(examples)
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;
/// Byte joining the tokens of an n-gram before hashing.
const NGRAM_SEPARATOR: u8 = 0x1f;

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut hash = FNV_OFFSET;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Hashed bag-of-n-grams featurizer.
///
/// Pipeline: lowercase, split on non-alphanumeric characters, form all word
/// n-grams with n up to `ngram_max`, hash each n-gram (tokens joined by the
/// 0x1f separator byte) with 64-bit FNV-1a, and accumulate counts at
/// `hash % dim`. The count vector is L2-normalized; an all-zero vector stays
/// zero.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Featurizer {
    pub dim: usize,
    pub ngram_max: usize,
}

impl Featurizer {
    pub fn new(dim: usize, ngram_max: usize) -> Result<Self> {
        if dim < 16 {
            return Err(Error::Config(format!(
                "feature dimension must be >= 16, got {dim}"
            )));
        }
        if !(1..=3).contains(&ngram_max) {
            return Err(Error::Config(format!(
                "ngram_max must be 1, 2, or 3, got {ngram_max}"
            )));
        }
        Ok(Self { dim, ngram_max })
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let mut values = vec![0.0; self.dim];
        for n in 1..=self.ngram_max {
            if tokens.len() < n {
                break;
            }
            for window in tokens.windows(n) {
                let bytes = window.iter().enumerate().flat_map(|(i, tok)| {
                    let sep = if i > 0 { Some(NGRAM_SEPARATOR) } else { None };
                    sep.into_iter().chain(tok.bytes())
                });
                let idx = (fnv1a(bytes) % self.dim as u64) as usize;
                values[idx] += 1.0;
            }
        }
        let norm = l2_norm(&values);
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        values
    }

    /// Feature rows for a set of examples, in order.
    pub fn matrix(&self, examples: &[&Example]) -> Matrix {
        let mut data = Vec::with_capacity(examples.len() * self.dim);
        for ex in examples {
            data.extend(self.vector(&ex.text));
        }
        Matrix::from_vec(examples.len(), self.dim, data)
    }
}

/// A featurized mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// MxF feature rows.
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Deterministic shuffled mini-batches for one epoch, keyed by (seed, epoch).
/// A final partial batch is kept unless it has fewer than 2 examples (the
/// contrastive task needs at least 2 rows before duplication).
pub fn batch_iter(
    split: &[Example],
    featurizer: &Featurizer,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be >= 2, got {batch_size}"
        )));
    }
    if split.is_empty() {
        return Err(Error::Config("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut rng = RngState::for_domain(seed, Domain::Shuffle(epoch));
    rng.shuffle(&mut order);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let examples: Vec<&Example> = chunk.iter().map(|&i| &split[i]).collect();
        batches.push(Batch {
            features: featurizer.matrix(&examples),
            labels: examples.iter().map(|e| e.label_id).collect(),
        });
    }
    Ok(batches)
}

/// The pair of classes the synthetic generator makes confusable.
pub const CONFUSABLE_PAIR: (usize, usize) = (0, 1);

const SYNTH_VOCAB_PER_CLASS: usize = 48;
const SYNTH_DOC_LEN: usize = 8;

/// Synthetic corpus where classes 0 and 1 share an `overlap` fraction of
/// their vocabulary and all other classes are cleanly separated.
///
/// The train split holds `per_class` examples per class; validation and test
/// each hold a quarter of that (at least one). Deterministic given the seed.
pub fn make_synthetic_confusable(
    seed: u64,
    n_classes: usize,
    per_class: usize,
    overlap: f64,
) -> Result<Corpus> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic corpus needs >= 2 classes, got {n_classes}"
        )));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::Config(format!(
            "overlap must be in [0, 1], got {overlap}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }

    let shared_count = (overlap * SYNTH_VOCAB_PER_CLASS as f64).round() as usize;
    let vocab: Vec<Vec<String>> = (0..n_classes)
        .map(|c| {
            (0..SYNTH_VOCAB_PER_CLASS)
                .map(|k| {
                    if (c == CONFUSABLE_PAIR.0 || c == CONFUSABLE_PAIR.1) && k < shared_count {
                        format!("shared{k}")
                    } else {
                        format!("class{c}word{k}")
                    }
                })
                .collect()
        })
        .collect();

    let label_space = LabelSpace::new((0..n_classes).map(|c| format!("class{c}")).collect())?;
    let mut rng = RngState::for_domain(seed, Domain::Synthetic);
    let eval_per_class = (per_class / 4).max(1);

    let mut make_split = |count: usize| -> Vec<Example> {
        let mut examples = Vec::with_capacity(count * n_classes);
        for (class, words) in vocab.iter().enumerate() {
            for _ in 0..count {
                let text = (0..SYNTH_DOC_LEN)
                    .map(|_| words[rng.below(words.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                examples.push(Example {
                    text,
                    label_id: class,
                });
            }
        }
        examples
    };

    Ok(Corpus {
        train: make_split(per_class),
        validation: make_split(eval_per_class),
        test: make_split(eval_per_class),
        label_space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_tsv_minimal() {
        let f = write_tmp("pos\tgood movie\nneg\tbad movie\n");
        let corpus = load_tsv(f.path(), None).unwrap();
        assert_eq!(corpus.label_space.len(), 2);
        let total = corpus.train.len() + corpus.validation.len() + corpus.test.len();
        assert_eq!(total, 2);
    }

    #[test]
    fn load_tsv_empty_file_errors() {
        let f = write_tmp("");
        match load_tsv(f.path(), None) {
            Err(Error::EmptyCorpus { .. }) => {}
            other => panic!("expected empty corpus error, got {other:?}"),
        }
    }

    #[test]
    fn load_tsv_comments_only_is_empty() {
        let f = write_tmp("# header\n\n# another\n");
        assert!(matches!(
            load_tsv(f.path(), None),
            Err(Error::EmptyCorpus { .. })
        ));
    }

    #[test]
    fn load_tsv_missing_tab_names_line() {
        let f = write_tmp("no_tab_here\n");
        match load_tsv(f.path(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_tsv_unknown_label_with_fixed_space() {
        let f = write_tmp("pos\tfine\nmystery\todd\n");
        let space = LabelSpace::new(vec!["pos".into(), "neg".into()]).unwrap();
        match load_tsv(f.path(), Some(space)) {
            Err(Error::UnknownLabel { label, line, .. }) => {
                assert_eq!(label, "mystery");
                assert_eq!(line, 2);
            }
            other => panic!("expected unknown label, got {other:?}"),
        }
    }

    #[test]
    fn default_split_is_80_10_10() {
        let lines: String = (0..100)
            .map(|i| format!("l{}\ttext number {i}\n", i % 4))
            .collect();
        let f = write_tmp(&lines);
        let corpus = load_tsv(f.path(), None).unwrap();
        assert_eq!(corpus.train.len(), 80);
        assert_eq!(corpus.validation.len(), 10);
        assert_eq!(corpus.test.len(), 10);
        // Splits are disjoint by construction: every example appears once.
        let mut texts: Vec<&str> = corpus
            .train
            .iter()
            .chain(&corpus.validation)
            .chain(&corpus.test)
            .map(|e| e.text.as_str())
            .collect();
        texts.sort_unstable();
        texts.dedup();
        assert_eq!(texts.len(), 100);
    }

    #[test]
    fn featurize_empty_text_is_zero_vector() {
        let feat = Featurizer::new(32, 2).unwrap();
        let v = feat.vector("");
        assert_eq!(v.len(), 32);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn featurize_is_deterministic() {
        let feat = Featurizer::new(64, 3).unwrap();
        let a = feat.vector("The quick brown fox, again: the quick fox");
        let b = feat.vector("The quick brown fox, again: the quick fox");
        assert_eq!(a, b);
    }

    #[test]
    fn featurize_unigrams_are_order_invariant() {
        // Direct-hash oracle: "a b" and "b a" must hit the same two buckets.
        let feat = Featurizer::new(64, 1).unwrap();
        let idx_a = (fnv1a("a".bytes()) % 64) as usize;
        let idx_b = (fnv1a("b".bytes()) % 64) as usize;
        let ab = feat.vector("a b");
        let ba = feat.vector("b a");
        assert_eq!(ab, ba);
        let expected = 1.0 / 2f64.sqrt();
        if idx_a != idx_b {
            assert!((ab[idx_a] - expected).abs() < 1e-15);
            assert!((ab[idx_b] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn featurize_norm_is_one_or_zero() {
        let feat = Featurizer::new(32, 2).unwrap();
        for text in ["hello world", "a", "...", "x y z x y z"] {
            let v = feat.vector(text);
            let norm = l2_norm(&v);
            assert!(
                norm == 0.0 || (norm - 1.0).abs() < 1e-12,
                "norm {norm} for {text:?}"
            );
        }
    }

    #[test]
    fn featurizer_rejects_bad_params() {
        assert!(Featurizer::new(8, 1).is_err());
        assert!(Featurizer::new(32, 0).is_err());
        assert!(Featurizer::new(32, 4).is_err());
    }

    fn toy_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                text: format!("token{i} filler"),
                label_id: i % 2,
            })
            .collect()
    }

    #[test]
    fn batch_sizes_follow_drop_rule() {
        let feat = Featurizer::new(32, 1).unwrap();
        let ten = toy_examples(10);
        let sizes: Vec<usize> = batch_iter(&ten, &feat, 4, 0, 1)
            .unwrap()
            .iter()
            .map(Batch::size)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let five = toy_examples(5);
        let sizes: Vec<usize> = batch_iter(&five, &feat, 4, 0, 1)
            .unwrap()
            .iter()
            .map(Batch::size)
            .collect();
        assert_eq!(sizes, vec![4], "1-example remainder must be dropped");
    }

    #[test]
    fn batch_iter_deterministic_and_covers_epoch() {
        let feat = Featurizer::new(32, 1).unwrap();
        let examples = toy_examples(11);
        let a = batch_iter(&examples, &feat, 4, 7, 3).unwrap();
        let b = batch_iter(&examples, &feat, 4, 7, 3).unwrap();
        let order = |batches: &[Batch]| -> Vec<Vec<usize>> {
            batches.iter().map(|bt| bt.labels.clone()).collect()
        };
        assert_eq!(order(&a), order(&b));
        // Coverage: the epoch's batches hold each retained example exactly
        // once. All 11 texts are distinct, so feature rows identify them.
        let all = feat.matrix(&examples.iter().collect::<Vec<_>>());
        let mut expected: Vec<Vec<u64>> = (0..all.rows())
            .map(|i| all.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut covered: Vec<Vec<u64>> = a
            .iter()
            .flat_map(|batch| {
                (0..batch.size())
                    .map(|i| batch.features.row(i).iter().map(|v| v.to_bits()).collect())
                    .collect::<Vec<_>>()
            })
            .collect();
        expected.sort_unstable();
        covered.sort_unstable();
        assert_eq!(covered, expected);
        // Different epoch shuffles differently.
        let c = batch_iter(&examples, &feat, 4, 7, 4).unwrap();
        assert_ne!(order(&a), order(&c));
    }

    #[test]
    fn batch_iter_rejects_small_batch_size() {
        let feat = Featurizer::new(32, 1).unwrap();
        assert!(batch_iter(&toy_examples(4), &feat, 1, 0, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_uniform() {
        let a = make_synthetic_confusable(9, 4, 20, 0.5).unwrap();
        let b = make_synthetic_confusable(9, 4, 20, 0.5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.test, b.test);
        let mut counts = vec![0usize; 4];
        for e in &a.train {
            counts[e.label_id] += 1;
        }
        assert_eq!(counts, vec![20; 4]);
        assert_eq!(a.validation.len(), 4 * 5);
        assert_eq!(a.test.len(), 4 * 5);
    }

    #[test]
    fn synthetic_full_overlap_pair_shares_vocabulary() {
        let corpus = make_synthetic_confusable(3, 3, 10, 1.0).unwrap();
        let vocab_of = |class: usize| -> std::collections::BTreeSet<String> {
            corpus
                .train
                .iter()
                .filter(|e| e.label_id == class)
                .flat_map(|e| e.text.split(' ').map(str::to_string))
                .collect()
        };
        let v0 = vocab_of(0);
        let v1 = vocab_of(1);
        let v2 = vocab_of(2);
        assert!(v0.iter().all(|w| w.starts_with("shared")));
        assert!(v1.iter().all(|w| w.starts_with("shared")));
        assert!(v2.iter().all(|w| w.starts_with("class2")));
    }
}
