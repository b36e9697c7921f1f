//! Feature schema, categorical encoding, and TSV ingestion of impression
//! logs into in-memory datasets.
//!
//! Files are headered, UTF-8, tab-delimited. The loader is header-driven:
//! every field named by the schema must exist as a column; extra columns are
//! ignored. Datasets are immutable after load and safe to share read-only.

use crate::error::{AieError, Result};
use crate::util::fnv1a64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Token written for the reserved index 0 when a sample produced by frozen
/// encoding is saved back to disk.
pub const UNSEEN_TOKEN: &str = "__unseen__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncodingPolicy {
    /// Stable index per distinct token in first-seen order; index 0 is
    /// reserved for tokens unseen at fit time.
    Dictionary,
    /// `index = stable_hash(token) % buckets`; no fitting required.
    Hash { buckets: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    /// Ordered `(name, cardinality)` pairs; the order fixes the layout of
    /// [`Sample::x`]. Cardinality counts the reserved index 0.
    pub categorical_fields: Vec<(String, usize)>,
    /// Name of the field that designates the auction scenario / scene.
    pub scenario_field: String,
    pub label_field: String,
    pub bid_field: String,
    pub payprice_field: String,
    /// Columns that jointly identify one simulated auction. May be empty, in
    /// which case every sample forms its own group.
    #[serde(default)]
    pub group_fields: Vec<String>,
    #[serde(default = "default_encoding")]
    pub encoding: EncodingPolicy,
}

fn default_encoding() -> EncodingPolicy {
    EncodingPolicy::Dictionary
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (name, card) in &self.categorical_fields {
            if !seen.insert(name.clone()) {
                issues.push(format!("duplicate field name {name:?}"));
            }
            if *card < 1 {
                issues.push(format!("field {name:?} has cardinality {card} < 1"));
            }
        }
        if self.field_index(&self.scenario_field).is_none() {
            issues.push(format!(
                "scenario_field {:?} is not a categorical field",
                self.scenario_field
            ));
        }
        if let EncodingPolicy::Hash { buckets } = self.encoding {
            if buckets == 0 {
                issues.push("hash encoding needs buckets >= 1".to_string());
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(AieError::InvalidConfig { issues })
        }
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.categorical_fields.iter().position(|(n, _)| n == name)
    }

    pub fn scenario_index(&self) -> usize {
        self.field_index(&self.scenario_field)
            .expect("validated schema")
    }

    pub fn n_fields(&self) -> usize {
        self.categorical_fields.len()
    }

    /// Effective embedding-table cardinality of a field.
    pub fn cardinality(&self, field: usize) -> usize {
        match self.encoding {
            EncodingPolicy::Dictionary => self.categorical_fields[field].1,
            EncodingPolicy::Hash { buckets } => buckets,
        }
    }
}

/// Per-field token dictionaries. In fit mode new tokens are assigned fresh
/// indices; in frozen mode unseen tokens map to the reserved index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoders {
    /// `rev[field][index]` is the token for that index; slot 0 is reserved.
    rev: Vec<Vec<String>>,
    #[serde(skip)]
    maps: Vec<HashMap<String, u32>>,
    frozen: bool,
}

impl Encoders {
    pub fn new(schema: &FeatureSchema) -> Self {
        let n = schema.n_fields();
        Encoders {
            rev: vec![vec![UNSEEN_TOKEN.to_string()]; n],
            maps: vec![HashMap::new(); n],
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Rebuilds the lookup maps after deserialization.
    pub fn rebuild(&mut self) {
        self.maps = self
            .rev
            .iter()
            .map(|tokens| {
                tokens
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(i, t)| (t.clone(), i as u32))
                    .collect()
            })
            .collect();
    }

    /// Number of assigned indices (including the reserved slot).
    pub fn vocab_size(&self, field: usize) -> usize {
        self.rev[field].len()
    }

    pub fn token(&self, field: usize, index: u32) -> &str {
        &self.rev[field][index as usize]
    }

    /// Index of a token under a frozen dictionary; 0 when unseen.
    pub fn index_of(&self, field: usize, token: &str) -> u32 {
        self.maps[field].get(token).copied().unwrap_or(0)
    }

    fn encode(
        &mut self,
        schema: &FeatureSchema,
        field: usize,
        token: &str,
    ) -> std::result::Result<u32, String> {
        match schema.encoding {
            EncodingPolicy::Hash { buckets } => {
                Ok((fnv1a64(token.as_bytes()) % buckets as u64) as u32)
            }
            EncodingPolicy::Dictionary => {
                if let Some(&idx) = self.maps[field].get(token) {
                    return Ok(idx);
                }
                if self.frozen {
                    return Ok(0);
                }
                let idx = self.rev[field].len();
                if idx >= schema.categorical_fields[field].1 {
                    return Err(format!(
                        "field {:?}: token {token:?} exceeds cardinality {}",
                        schema.categorical_fields[field].0, schema.categorical_fields[field].1
                    ));
                }
                self.rev[field].push(token.to_string());
                self.maps[field].insert(token.to_string(), idx as u32);
                Ok(idx as u32)
            }
        }
    }
}

/// One impression-log row after encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// One categorical index per schema field, in schema order.
    pub x: Vec<u32>,
    /// Binary click label.
    pub y: u8,
    /// CPC bid, raw currency units.
    pub bid: f64,
    /// Market price actually charged, raw currency units.
    pub payprice: f64,
    /// Copy of the scenario field's index.
    pub scenario: u32,
    /// Index into [`Dataset::group_keys`].
    pub group: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
    UnbiasedTest,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub encoders: Encoders,
    /// Distinct group-key token tuples, referenced by [`Sample::group`].
    pub group_keys: Vec<Vec<String>>,
    pub samples: Vec<Sample>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_positives(&self) -> usize {
        self.samples.iter().filter(|s| s.y == 1).count()
    }

    pub fn ctr(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.n_positives() as f64 / self.samples.len() as f64
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.split_tag = tag;
        self
    }

    /// Loads a TSV, fitting fresh dictionaries in first-seen order.
    pub fn load_tsv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
        let encoders = Encoders::new(schema);
        load_tsv_impl(path.as_ref(), schema, encoders)
    }

    /// Loads a TSV under previously fitted dictionaries; unseen tokens map to
    /// the reserved index 0.
    pub fn load_tsv_frozen(
        path: impl AsRef<Path>,
        schema: &FeatureSchema,
        encoders: &Encoders,
    ) -> Result<Dataset> {
        let mut enc = encoders.clone();
        enc.rebuild();
        load_tsv_impl(path.as_ref(), schema, enc.frozen())
    }

    /// Writes the dataset back out. Column order: label, the first two group
    /// fields, bid, payprice, remaining group fields, then feature columns.
    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path)
            .map_err(|e| AieError::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        let mut line = String::new();
        let columns = self.column_layout();
        line.push_str(&columns.join("\t"));
        line.push('\n');
        out.write_all(line.as_bytes())
            .map_err(|e| AieError::io(path.display().to_string(), e))?;

        let g_split = self.schema.group_fields.len().min(2);
        for s in &self.samples {
            line.clear();
            let _ = write!(line, "{}", s.y);
            let group = self
                .group_keys
                .get(s.group as usize)
                .map(|g| g.as_slice())
                .unwrap_or(&[]);
            for tok in group.iter().take(g_split) {
                line.push('\t');
                line.push_str(tok);
            }
            let _ = write!(line, "\t{}\t{}", s.bid, s.payprice);
            for tok in group.iter().skip(g_split) {
                line.push('\t');
                line.push_str(tok);
            }
            for (f, &idx) in s.x.iter().enumerate() {
                line.push('\t');
                match self.schema.encoding {
                    EncodingPolicy::Dictionary => line.push_str(self.encoders.token(f, idx)),
                    // Hash encoding is not reversible; write the bucket index.
                    EncodingPolicy::Hash { .. } => {
                        let _ = write!(line, "{idx}");
                    }
                }
            }
            line.push('\n');
            out.write_all(line.as_bytes())
                .map_err(|e| AieError::io(path.display().to_string(), e))?;
        }
        out.flush()
            .map_err(|e| AieError::io(path.display().to_string(), e))?;
        Ok(())
    }

    fn column_layout(&self) -> Vec<String> {
        let g = &self.schema.group_fields;
        let g_split = g.len().min(2);
        let mut cols = vec![self.schema.label_field.clone()];
        cols.extend(g.iter().take(g_split).cloned());
        cols.push(self.schema.bid_field.clone());
        cols.push(self.schema.payprice_field.clone());
        cols.extend(g.iter().skip(g_split).cloned());
        cols.extend(self.schema.categorical_fields.iter().map(|(n, _)| n.clone()));
        cols
    }

    /// Re-encodes every sample under another dataset's dictionaries (frozen,
    /// so tokens unseen there map to the reserved index 0). Used to align a
    /// holdout generated separately with the training encoding.
    pub fn reencode_with(&self, encoders: &Encoders) -> Result<Dataset> {
        if self.schema.encoding != EncodingPolicy::Dictionary {
            return Ok(self.clone());
        }
        let mut target = encoders.clone();
        target.rebuild();
        let mut samples = self.samples.clone();
        for s in &mut samples {
            for (f, xi) in s.x.iter_mut().enumerate() {
                let token = self.encoders.token(f, *xi);
                *xi = target.index_of(f, token);
            }
            s.scenario = s.x[self.schema.scenario_index()];
        }
        Ok(Dataset {
            schema: self.schema.clone(),
            encoders: target.frozen(),
            group_keys: self.group_keys.clone(),
            samples,
            split_tag: self.split_tag,
        })
    }

    /// Splits into consecutive (ordered) or seeded-shuffle parts whose sizes
    /// differ from the exact fractions by at most one sample.
    pub fn split_by_fraction(
        &self,
        fractions: &[f64],
        ordered: bool,
        seed: u64,
    ) -> Result<Vec<Dataset>> {
        if self.samples.is_empty() {
            return Err(AieError::invalid("cannot split an empty dataset"));
        }
        if fractions.is_empty() || fractions.iter().any(|&f| f <= 0.0) {
            return Err(AieError::invalid("fractions must be positive"));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AieError::invalid(format!(
                "fractions must sum to 1 (got {total})"
            )));
        }
        let n = self.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        if !ordered {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
        let mut parts = Vec::with_capacity(fractions.len());
        let mut cum = 0.0;
        let mut start = 0usize;
        for f in fractions {
            cum += f;
            let end = ((cum * n as f64).round() as usize).min(n);
            let samples = order[start..end]
                .iter()
                .map(|&i| self.samples[i].clone())
                .collect();
            parts.push(Dataset {
                schema: self.schema.clone(),
                encoders: self.encoders.clone(),
                group_keys: self.group_keys.clone(),
                samples,
                split_tag: self.split_tag,
            });
            start = end;
        }
        Ok(parts)
    }
}

/// Incremental dataset assembly used by both the TSV loader and the
/// synthetic generator so both take the same encoding path.
pub struct DatasetBuilder {
    schema: FeatureSchema,
    encoders: Encoders,
    group_keys: Vec<Vec<String>>,
    group_index: HashMap<Vec<String>, u32>,
    samples: Vec<Sample>,
}

impl DatasetBuilder {
    pub fn new(schema: FeatureSchema) -> Result<Self> {
        schema.validate()?;
        let encoders = Encoders::new(&schema);
        Ok(DatasetBuilder {
            encoders,
            schema,
            group_keys: Vec::new(),
            group_index: HashMap::new(),
            samples: Vec::new(),
        })
    }

    pub fn with_encoders(schema: FeatureSchema, encoders: Encoders) -> Result<Self> {
        schema.validate()?;
        Ok(DatasetBuilder {
            encoders,
            schema,
            group_keys: Vec::new(),
            group_index: HashMap::new(),
            samples: Vec::new(),
        })
    }

    pub fn push_row(
        &mut self,
        label: u8,
        bid: f64,
        payprice: f64,
        group_tokens: &[String],
        feature_tokens: &[String],
    ) -> std::result::Result<(), String> {
        if label > 1 {
            return Err(format!("label must be 0 or 1, got {label}"));
        }
        if !(bid.is_finite() && bid >= 0.0) {
            return Err(format!("bid must be finite and >= 0, got {bid}"));
        }
        if !(payprice.is_finite() && payprice >= 0.0) {
            return Err(format!("payprice must be finite and >= 0, got {payprice}"));
        }
        if feature_tokens.len() != self.schema.n_fields() {
            return Err(format!(
                "expected {} feature tokens, got {}",
                self.schema.n_fields(),
                feature_tokens.len()
            ));
        }
        let mut x = Vec::with_capacity(feature_tokens.len());
        for (f, token) in feature_tokens.iter().enumerate() {
            x.push(self.encoders.encode(&self.schema, f, token)?);
        }
        let group = if self.schema.group_fields.is_empty() {
            let idx = self.group_keys.len() as u32;
            self.group_keys.push(vec![idx.to_string()]);
            idx
        } else {
            match self.group_index.get(group_tokens) {
                Some(&g) => g,
                None => {
                    let g = self.group_keys.len() as u32;
                    self.group_keys.push(group_tokens.to_vec());
                    self.group_index.insert(group_tokens.to_vec(), g);
                    g
                }
            }
        };
        let scenario = x[self.schema.scenario_index()];
        self.samples.push(Sample {
            x,
            y: label,
            bid,
            payprice,
            scenario,
            group,
        });
        Ok(())
    }

    pub fn finish(self, tag: SplitTag) -> Dataset {
        Dataset {
            schema: self.schema,
            encoders: self.encoders,
            group_keys: self.group_keys,
            samples: self.samples,
            split_tag: tag,
        }
    }
}

fn load_tsv_impl(path: &Path, schema: &FeatureSchema, encoders: Encoders) -> Result<Dataset> {
    schema.validate()?;
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| AieError::io(display.clone(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let parse_err = |line: usize, msg: String| AieError::Parse {
        path: display.clone(),
        line,
        msg,
    };

    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(AieError::io(display, e)),
        None => return Err(parse_err(1, "empty file".to_string())),
    };
    let columns: Vec<&str> = header.split('\t').collect();
    let col = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| parse_err(1, format!("missing column {name:?}")))
    };
    let label_col = col(&schema.label_field)?;
    let bid_col = col(&schema.bid_field)?;
    let pay_col = col(&schema.payprice_field)?;
    let group_cols: Vec<usize> = schema
        .group_fields
        .iter()
        .map(|g| col(g))
        .collect::<Result<_>>()?;
    let feature_cols: Vec<usize> = schema
        .categorical_fields
        .iter()
        .map(|(n, _)| col(n))
        .collect::<Result<_>>()?;

    let mut builder = DatasetBuilder::with_encoders(schema.clone(), encoders)?;
    let n_cols = columns.len();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let row = line.map_err(|e| AieError::io(display.clone(), e))?;
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != n_cols {
            return Err(parse_err(
                line_no,
                format!("expected {n_cols} columns, got {}", fields.len()),
            ));
        }
        let label: u8 = fields[label_col]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad label {:?}", fields[label_col])))?;
        let bid: f64 = fields[bid_col]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad bid {:?}", fields[bid_col])))?;
        let payprice: f64 = fields[pay_col]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad payprice {:?}", fields[pay_col])))?;
        let group_tokens: Vec<String> =
            group_cols.iter().map(|&c| fields[c].to_string()).collect();
        let feature_tokens: Vec<String> =
            feature_cols.iter().map(|&c| fields[c].to_string()).collect();
        builder
            .push_row(label, bid, payprice, &group_tokens, &feature_tokens)
            .map_err(|msg| parse_err(line_no, msg))?;
    }
    let dataset = builder.finish(SplitTag::Train);
    Ok(dataset)
}
