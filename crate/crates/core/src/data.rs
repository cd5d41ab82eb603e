//! Observed data: syllable sequences with covariates and inter-syllable intervals.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the syllable alphabet.
pub const N_SYLLABLES: usize = 4;

/// Reported labels, indexed by internal code.
pub const SYLLABLE_LABELS: [&str; N_SYLLABLES] = ["d", "m", "s", "u"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SyllableCode(u8);

impl SyllableCode {
    pub fn new(code: usize) -> Result<Self> {
        if code < N_SYLLABLES {
            Ok(SyllableCode(code as u8))
        } else {
            Err(Error::Domain(format!("syllable code {code} out of range")))
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        SYLLABLE_LABELS.iter().position(|&l| l == label).map(|i| SyllableCode(i as u8))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> &'static str {
        SYLLABLE_LABELS[self.index()]
    }

    pub fn all() -> impl Iterator<Item = SyllableCode> {
        (0..N_SYLLABLES as u8).map(SyllableCode)
    }
}

impl TryFrom<u8> for SyllableCode {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        SyllableCode::new(v as usize)
    }
}

impl From<SyllableCode> for u8 {
    fn from(c: SyllableCode) -> u8 {
        c.0
    }
}

impl fmt::Display for SyllableCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A categorical covariate with ordered, distinct level labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub levels: Vec<String>,
}

impl CovariateSpec {
    pub fn new(name: impl Into<String>, levels: &[&str]) -> Result<Self> {
        let spec = CovariateSpec {
            name: name.into(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidDataset(format!("covariate `{}` has no levels", self.name)));
        }
        for (i, a) in self.levels.iter().enumerate() {
            if self.levels[..i].contains(a) {
                return Err(Error::InvalidDataset(format!("covariate `{}` repeats level `{a}`", self.name)));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.levels.len()
    }

    pub fn code_of(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    /// Genotype covariate of the motivating data: mutant `F`, wild type `W`.
    pub fn genotype() -> Self {
        CovariateSpec::new("genotype", &["F", "W"]).expect("static spec")
    }

    /// Social context: urine `U`, live female `L`, anesthetized female `A`.
    pub fn context() -> Self {
        CovariateSpec::new("context", &["U", "L", "A"]).expect("static spec")
    }

    pub fn default_schema() -> Vec<CovariateSpec> {
        vec![CovariateSpec::genotype(), CovariateSpec::context()]
    }

    /// The preceding syllable viewed as a covariate.
    pub fn preceding_syllable() -> Self {
        CovariateSpec::new("prev_syllable", &SYLLABLE_LABELS).expect("static spec")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub mouse: usize,
    pub covariates: Vec<usize>,
    pub syllables: Vec<SyllableCode>,
    /// Intervals in seconds; `isis[t]` separates `syllables[t]` and `syllables[t + 1]`.
    pub isis: Vec<f64>,
}

impl Sequence {
    pub fn transitions(&self) -> usize {
        self.syllables.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub covariates: Vec<CovariateSpec>,
    /// Original mouse identifiers; position is the dense mouse index.
    pub mouse_labels: Vec<String>,
    pub sequences: Vec<Sequence>,
}

impl SequenceDataset {
    pub fn new(covariates: Vec<CovariateSpec>, mouse_labels: Vec<String>, sequences: Vec<Sequence>) -> Result<Self> {
        let ds = SequenceDataset { covariates, mouse_labels, sequences };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.covariates {
            c.validate()?;
        }
        for (s, seq) in self.sequences.iter().enumerate() {
            if seq.syllables.len() < 2 {
                return Err(Error::InvalidDataset(format!("sequence {s} has fewer than two syllables")));
            }
            if seq.isis.len() + 1 != seq.syllables.len() {
                return Err(Error::InvalidDataset(format!("sequence {s}: interval count must be syllable count minus one")));
            }
            if let Some(t) = seq.isis.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidDataset(format!("sequence {s}: non-positive interval at position {t}")));
            }
            if seq.mouse >= self.mouse_labels.len() {
                return Err(Error::InvalidDataset(format!("sequence {s}: mouse index {} out of range", seq.mouse)));
            }
            if seq.covariates.len() != self.covariates.len() {
                return Err(Error::InvalidDataset(format!("sequence {s}: wrong number of covariate values")));
            }
            for (j, (&v, spec)) in seq.covariates.iter().zip(&self.covariates).enumerate() {
                if v >= spec.d() {
                    return Err(Error::InvalidDataset(format!("sequence {s}: covariate {j} level {v} out of range")));
                }
            }
        }
        Ok(())
    }

    pub fn n_mice(&self) -> usize {
        self.mouse_labels.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.sequences.iter().map(Sequence::transitions).sum()
    }

    pub fn covariate_dims(&self) -> Vec<usize> {
        self.covariates.iter().map(CovariateSpec::d).collect()
    }

    /// Overall syllable frequencies over every position of every sequence.
    pub fn syllable_frequencies(&self) -> [f64; N_SYLLABLES] {
        let mut counts = [0.0; N_SYLLABLES];
        let mut total = 0.0;
        for seq in &self.sequences {
            for y in &seq.syllables {
                counts[y.index()] += 1.0;
                total += 1.0;
            }
        }
        if total == 0.0 {
            return [1.0 / N_SYLLABLES as f64; N_SYLLABLES];
        }
        counts.map(|c| c / total)
    }
}

/// One transition with its interval, as seen by the samplers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatRecord {
    pub sequence: usize,
    pub mouse: usize,
    pub covariates: Vec<usize>,
    pub prev: SyllableCode,
    pub cur: SyllableCode,
    /// Raw interval in seconds.
    pub isi: f64,
    /// `ln(1 + isi)`.
    pub log_isi: f64,
}

pub fn flatten(ds: &SequenceDataset) -> Vec<FlatRecord> {
    let mut out = Vec::with_capacity(ds.n_transitions());
    for (s, seq) in ds.sequences.iter().enumerate() {
        for t in 1..seq.syllables.len() {
            let isi = seq.isis[t - 1];
            out.push(FlatRecord {
                sequence: s,
                mouse: seq.mouse,
                covariates: seq.covariates.clone(),
                prev: seq.syllables[t - 1],
                cur: seq.syllables[t],
                isi,
                log_isi: isi.ln_1p(),
            });
        }
    }
    out
}

/// Grouping factor for descriptive tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    Mouse,
    Covariate(usize),
    PrevSyllable,
}

/// Dense table over the cross product of grouping factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedTable<T> {
    pub factors: Vec<Factor>,
    pub dims: Vec<usize>,
    pub cells: Vec<T>,
}

impl<T> GroupedTable<T> {
    pub fn index(&self, levels: &[usize]) -> usize {
        mixed_radix_index(&self.dims, levels)
    }

    pub fn get(&self, levels: &[usize]) -> &T {
        &self.cells[self.index(levels)]
    }

    /// Level tuple of the cell at flat index `idx`.
    pub fn levels_of(&self, idx: usize) -> Vec<usize> {
        mixed_radix_levels(&self.dims, idx)
    }
}

pub(crate) fn mixed_radix_index(dims: &[usize], levels: &[usize]) -> usize {
    debug_assert_eq!(dims.len(), levels.len());
    levels.iter().zip(dims).fold(0, |acc, (&l, &d)| {
        debug_assert!(l < d);
        acc * d + l
    })
}

pub(crate) fn mixed_radix_levels(dims: &[usize], mut idx: usize) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (o, &d) in out.iter_mut().zip(dims).rev() {
        *o = idx % d;
        idx /= d;
    }
    out
}

fn factor_dim(ds: &SequenceDataset, f: Factor) -> usize {
    match f {
        Factor::Mouse => ds.n_mice(),
        Factor::Covariate(j) => ds.covariates[j].d(),
        Factor::PrevSyllable => N_SYLLABLES,
    }
}

fn factor_level(r: &FlatRecord, f: Factor) -> usize {
    match f {
        Factor::Mouse => r.mouse,
        Factor::Covariate(j) => r.covariates[j],
        Factor::PrevSyllable => r.prev.index(),
    }
}

fn check_factors(ds: &SequenceDataset, group_by: &[Factor]) -> Result<Vec<usize>> {
    for f in group_by {
        if let Factor::Covariate(j) = f {
            if *j >= ds.covariates.len() {
                return Err(Error::InvalidConfig(format!("no covariate with index {j}")));
            }
        }
    }
    Ok(group_by.iter().map(|&f| factor_dim(ds, f)).collect())
}

/// Transition counts `n(cur | prev)` per group; rows are preceding syllables.
pub fn transition_counts(ds: &SequenceDataset, group_by: &[Factor]) -> Result<GroupedTable<[[u64; N_SYLLABLES]; N_SYLLABLES]>> {
    let dims = check_factors(ds, group_by)?;
    let n_cells: usize = dims.iter().product();
    let mut table = GroupedTable {
        factors: group_by.to_vec(),
        dims,
        cells: vec![[[0u64; N_SYLLABLES]; N_SYLLABLES]; n_cells],
    };
    let mut levels = vec![0; group_by.len()];
    for r in flatten(ds) {
        for (l, &f) in levels.iter_mut().zip(group_by) {
            *l = factor_level(&r, f);
        }
        let idx = table.index(&levels);
        table.cells[idx][r.prev.index()][r.cur.index()] += 1;
    }
    Ok(table)
}

/// Mean and count of a group of raw intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub count: usize,
    pub mean: Option<f64>,
}

/// Arithmetic means of the raw intervals per group.
pub fn isi_means(ds: &SequenceDataset, group_by: &[Factor]) -> Result<GroupedTable<GroupMean>> {
    let dims = check_factors(ds, group_by)?;
    let n_cells: usize = dims.iter().product();
    let mut sums = vec![0.0; n_cells];
    let mut counts = vec![0usize; n_cells];
    let mut levels = vec![0; group_by.len()];
    for r in flatten(ds) {
        for (l, &f) in levels.iter_mut().zip(group_by) {
            *l = factor_level(&r, f);
        }
        let idx = mixed_radix_index(&dims, &levels);
        sums[idx] += r.isi;
        counts[idx] += 1;
    }
    let cells = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| GroupMean { count: n, mean: (n > 0).then(|| s / n as f64) })
        .collect();
    Ok(GroupedTable { factors: group_by.to_vec(), dims, cells })
}

const MOUSE_COL: &str = "mouse_id";
const PREV_COL: &str = "prev_syllable";
const CUR_COL: &str = "syllable";
const ISI_COL: &str = "isi";
const SEQ_COL: &str = "sequence_id";

/// Loads the flat transition CSV and reconstructs sequences.
///
/// Without a `sequence_id` column a new sequence starts whenever mouse or any
/// covariate changes between consecutive rows, or when a row's preceding
/// syllable does not continue the previous row.
pub fn load_csv(path: &Path, schema: &[CovariateSpec]) -> Result<SequenceDataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &[CovariateSpec]) -> Result<SequenceDataset> {
    for c in schema {
        c.validate()?;
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut expected: Vec<&str> = vec![MOUSE_COL];
    expected.extend(schema.iter().map(|c| c.name.as_str()));
    expected.extend([PREV_COL, CUR_COL, ISI_COL]);
    for (i, want) in expected.iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == *want => {}
            _ => return Err(Error::SchemaMismatch { column: want.to_string(), row: 1 }),
        }
    }
    let has_seq = match headers.len() - expected.len() {
        0 => false,
        1 if headers.get(expected.len()) == Some(SEQ_COL) => true,
        _ => {
            let column = headers.get(expected.len()).unwrap_or("").to_string();
            return Err(Error::SchemaMismatch { column, row: 1 });
        }
    };

    let n_cov = schema.len();
    let mut mouse_index: HashMap<String, usize> = HashMap::new();
    let mut mouse_labels = Vec::new();
    let mut sequences: Vec<Sequence> = Vec::new();
    let mut last_key: Option<(usize, Vec<usize>, Option<String>)> = None;

    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            let column = expected.get(rec.len()).copied().unwrap_or(SEQ_COL).to_string();
            return Err(Error::SchemaMismatch { column, row });
        }
        let mouse_label = rec[0].to_string();
        if mouse_label.is_empty() {
            return Err(Error::SchemaMismatch { column: MOUSE_COL.into(), row });
        }
        let next = mouse_labels.len();
        let mouse = *mouse_index.entry(mouse_label.clone()).or_insert(next);
        if mouse == next {
            mouse_labels.push(mouse_label);
        }
        let mut covs = Vec::with_capacity(n_cov);
        for (j, spec) in schema.iter().enumerate() {
            let label = &rec[1 + j];
            let code = spec
                .code_of(label)
                .ok_or_else(|| Error::InvalidLevel { label: label.to_string(), row })?;
            covs.push(code);
        }
        let syl = |col: usize| -> Result<SyllableCode> {
            SyllableCode::from_label(&rec[col]).ok_or_else(|| Error::InvalidLevel { label: rec[col].to_string(), row })
        };
        let prev = syl(1 + n_cov)?;
        let cur = syl(2 + n_cov)?;
        let isi: f64 = rec[3 + n_cov]
            .parse()
            .map_err(|_| Error::SchemaMismatch { column: ISI_COL.into(), row })?;
        if !(isi > 0.0 && isi.is_finite()) {
            return Err(Error::NonPositiveIsi { row });
        }
        let seq_id = has_seq.then(|| rec[4 + n_cov].to_string());

        let key = (mouse, covs, seq_id);
        let continues = match (&last_key, sequences.last()) {
            (Some(k), Some(seq)) if *k == key => {
                let tail = *seq.syllables.last().expect("non-empty");
                if tail != prev && has_seq {
                    return Err(Error::InvalidDataset(format!(
                        "row {row}: preceding syllable `{prev}` does not continue sequence `{}`",
                        key.2.as_deref().unwrap_or("")
                    )));
                }
                tail == prev
            }
            _ => false,
        };
        if continues {
            let seq = sequences.last_mut().expect("non-empty");
            seq.syllables.push(cur);
            seq.isis.push(isi);
        } else {
            sequences.push(Sequence {
                mouse,
                covariates: key.1.clone(),
                syllables: vec![prev, cur],
                isis: vec![isi],
            });
        }
        last_key = Some(key);
    }
    SequenceDataset::new(schema.to_vec(), mouse_labels, sequences)
}

/// Writes the flat CSV, always including `sequence_id` so reloading is exact.
pub fn write_csv<W: Write>(ds: &SequenceDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = vec![MOUSE_COL];
    header.extend(ds.covariates.iter().map(|c| c.name.as_str()));
    header.extend([PREV_COL, CUR_COL, ISI_COL, SEQ_COL]);
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for (s, seq) in ds.sequences.iter().enumerate() {
        for t in 1..seq.syllables.len() {
            row.clear();
            row.push(ds.mouse_labels[seq.mouse].clone());
            for (spec, &v) in ds.covariates.iter().zip(&seq.covariates) {
                row.push(spec.levels[v].clone());
            }
            row.push(seq.syllables[t - 1].label().to_string());
            row.push(seq.syllables[t].label().to_string());
            row.push(format!("{}", seq.isis[t - 1]));
            row.push(s.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &SequenceDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(ds, std::io::BufWriter::new(file))
}

fn factor_name(ds: &SequenceDataset, f: Factor) -> String {
    match f {
        Factor::Mouse => MOUSE_COL.to_string(),
        Factor::Covariate(j) => ds.covariates[j].name.clone(),
        Factor::PrevSyllable => PREV_COL.to_string(),
    }
}

fn factor_label(ds: &SequenceDataset, f: Factor, level: usize) -> String {
    match f {
        Factor::Mouse => ds.mouse_labels[level].clone(),
        Factor::Covariate(j) => ds.covariates[j].levels[level].clone(),
        Factor::PrevSyllable => SYLLABLE_LABELS[level].to_string(),
    }
}

/// Writes transition counts in long format: group columns, `from`, then one
/// column per following syllable and the row total.
pub fn write_transition_counts_csv<W: Write>(
    ds: &SequenceDataset,
    table: &GroupedTable<[[u64; N_SYLLABLES]; N_SYLLABLES]>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = table.factors.iter().map(|&f| factor_name(ds, f)).collect();
    header.push("from".into());
    header.extend(SYLLABLE_LABELS.iter().map(|s| s.to_string()));
    header.push("total".into());
    w.write_record(&header)?;
    for (idx, cell) in table.cells.iter().enumerate() {
        let levels = table.levels_of(idx);
        for (from, row) in cell.iter().enumerate() {
            let mut rec: Vec<String> = table.factors.iter().zip(&levels).map(|(&f, &l)| factor_label(ds, f, l)).collect();
            rec.push(SYLLABLE_LABELS[from].to_string());
            rec.extend(row.iter().map(|c| c.to_string()));
            rec.push(row.iter().sum::<u64>().to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_isi_means_csv<W: Write>(ds: &SequenceDataset, table: &GroupedTable<GroupMean>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = table.factors.iter().map(|&f| factor_name(ds, f)).collect();
    header.extend(["count".to_string(), "mean_isi".to_string()]);
    w.write_record(&header)?;
    for (idx, cell) in table.cells.iter().enumerate() {
        let levels = table.levels_of(idx);
        let mut rec: Vec<String> = table.factors.iter().zip(&levels).map(|(&f, &l)| factor_label(ds, f, l)).collect();
        rec.push(cell.count.to_string());
        rec.push(cell.mean.map(|m| m.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "mouse_id,genotype,context,prev_syllable,syllable,isi
1,F,A,s,s,0.017
1,F,A,s,d,0.082
1,F,A,d,u,0.3
1,F,U,s,m,0.2
2,W,U,m,m,1.5
";

    fn sample() -> SequenceDataset {
        read_csv(SAMPLE.as_bytes(), &CovariateSpec::default_schema()).unwrap()
    }

    #[test]
    fn parses_rows_and_reconstructs_sequences() {
        let ds = sample();
        assert_eq!(ds.n_mice(), 2);
        assert_eq!(ds.sequences.len(), 3);
        let first = &ds.sequences[0];
        assert_eq!(first.mouse, 0);
        assert_eq!(first.covariates, vec![0, 2]);
        assert_eq!(first.syllables.iter().map(|s| s.label()).collect::<Vec<_>>(), ["s", "s", "d", "u"]);
        assert_eq!(first.isis, vec![0.017, 0.082, 0.3]);
        assert_eq!(ds.n_transitions(), 5);
    }

    #[test]
    fn breaks_sequence_on_discontinuity() {
        let text = "mouse_id,genotype,context,prev_syllable,syllable,isi\n1,F,A,s,s,0.1\n1,F,A,d,d,0.1\n";
        let ds = read_csv(text.as_bytes(), &CovariateSpec::default_schema()).unwrap();
        assert_eq!(ds.sequences.len(), 2);
    }

    #[test]
    fn sequence_id_column_overrides_heuristic() {
        let text = "mouse_id,genotype,context,prev_syllable,syllable,isi,sequence_id\n1,F,A,s,s,0.1,a\n1,F,A,s,s,0.1,b\n";
        let ds = read_csv(text.as_bytes(), &CovariateSpec::default_schema()).unwrap();
        assert_eq!(ds.sequences.len(), 2);
        let bad = "mouse_id,genotype,context,prev_syllable,syllable,isi,sequence_id\n1,F,A,s,s,0.1,a\n1,F,A,d,s,0.1,a\n";
        assert!(matches!(read_csv(bad.as_bytes(), &CovariateSpec::default_schema()), Err(Error::InvalidDataset(_))));
    }

    #[test]
    fn rejects_bad_rows() {
        let schema = CovariateSpec::default_schema();
        let zero = "mouse_id,genotype,context,prev_syllable,syllable,isi\n1,F,A,s,s,0.0\n";
        assert!(matches!(read_csv(zero.as_bytes(), &schema), Err(Error::NonPositiveIsi { row: 2 })));
        let level = "mouse_id,genotype,context,prev_syllable,syllable,isi\n1,f,A,s,s,0.1\n";
        assert!(matches!(read_csv(level.as_bytes(), &schema), Err(Error::InvalidLevel { row: 2, .. })));
        let syl = "mouse_id,genotype,context,prev_syllable,syllable,isi\n1,F,A,s,x,0.1\n";
        assert!(matches!(read_csv(syl.as_bytes(), &schema), Err(Error::InvalidLevel { .. })));
        let header = "mouse,genotype,context,prev_syllable,syllable,isi\n";
        assert!(matches!(read_csv(header.as_bytes(), &schema), Err(Error::SchemaMismatch { row: 1, .. })));
        assert!(matches!(load_csv(Path::new("/nonexistent/x.csv"), &schema), Err(Error::MissingFile(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = sample();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &ds.covariates).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn flatten_counts_and_transform() {
        let ds = sample();
        let recs = flatten(&ds);
        assert_eq!(recs.len(), 5);
        assert!((recs[1].log_isi - 1.082f64.ln()).abs() < 1e-15);
        assert!((recs[1].log_isi - 0.078_810_7).abs() < 1e-6);
        assert!(recs.iter().all(|r| r.log_isi > 0.0));
    }

    #[test]
    fn grouped_tables() {
        let ds = sample();
        let all = transition_counts(&ds, &[]).unwrap();
        let total: u64 = all.cells[0].iter().flatten().sum();
        assert_eq!(total as usize, ds.n_transitions());
        let by_mouse = transition_counts(&ds, &[Factor::Mouse]).unwrap();
        assert_eq!(by_mouse.get(&[0])[2][2], 1);
        assert_eq!(by_mouse.get(&[1])[1][1], 1);
        let means = isi_means(&ds, &[Factor::Covariate(0), Factor::PrevSyllable]).unwrap();
        let w_m = means.get(&[1, 1]);
        assert_eq!(w_m.count, 1);
        assert_eq!(w_m.mean, Some(1.5));
        assert_eq!(means.get(&[1, 0]).mean, None);
        let empty = SequenceDataset::new(CovariateSpec::default_schema(), vec![], vec![]).unwrap();
        assert!(transition_counts(&empty, &[]).unwrap().cells[0].iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn mixed_radix_round_trip() {
        let dims = [2, 3, 4];
        for idx in 0..24 {
            assert_eq!(mixed_radix_index(&dims, &mixed_radix_levels(&dims, idx)), idx);
        }
    }
}
