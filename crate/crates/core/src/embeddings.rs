//! Pretrained word-vector tables.
//!
//! Two on-disk formats are supported:
//!
//! * text: a `"<vocab_size> <dimension>"` header line followed by one
//!   `"<token> <f_1> ... <f_n>"` line per entry;
//! * binary: the same ASCII header terminated by `\n`, then per entry the token
//!   bytes, a single space and `n` little-endian `f32` values.
//!
//! Vectors are widened to `f64` in memory. Tokens are stored verbatim; any case
//! folding is left to the caller.

use std::collections::HashMap;
use std::io::{self, BufRead, Read, Write};

use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("line {line}: {message}")]
    Text { line: usize, message: String },
    #[error("{message} (byte {offset})")]
    Binary { offset: u64, message: String },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid table: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Non-fatal issue found while loading a table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadWarning {
    /// A token appeared more than once; the first occurrence was kept.
    DuplicateToken { token: String, entry: usize },
}

/// Immutable token -> vector map with a fixed dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dimension: usize,
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    data: Vec<f64>,
}

impl PartialEq for EmbeddingTable {
    /// Equal when the dimension, token set and every vector (bitwise) agree.
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension
            && self.len() == other.len()
            && self.tokens.iter().all(|t| match (self.lookup(t), other.lookup(t)) {
                (Some(a), Some(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                _ => false,
            })
    }
}

/// Incremental constructor used by the loaders and by tests.
#[derive(Debug)]
pub struct TableBuilder {
    table: EmbeddingTable,
    warnings: Vec<LoadWarning>,
}

impl TableBuilder {
    pub fn new(dimension: usize) -> Self {
        TableBuilder {
            table: EmbeddingTable {
                dimension,
                index: HashMap::new(),
                tokens: Vec::new(),
                data: Vec::new(),
            },
            warnings: Vec::new(),
        }
    }

    pub fn with_capacity(dimension: usize, entries: usize) -> Self {
        let mut builder = Self::new(dimension);
        builder.table.index.reserve(entries);
        builder.table.tokens.reserve(entries);
        builder.table.data.reserve(entries.saturating_mul(dimension));
        builder
    }

    /// Adds an entry. Returns `false` (and records a warning) when the token is
    /// already present; the stored vector is left untouched.
    pub fn push(&mut self, token: &str, vector: &[f64]) -> Result<bool, EmbeddingError> {
        if vector.len() != self.table.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                left: vector.len(),
                right: self.table.dimension,
            });
        }
        if self.table.index.contains_key(token) {
            self.warnings.push(LoadWarning::DuplicateToken {
                token: token.to_string(),
                entry: self.table.tokens.len() + self.warnings.len() + 1,
            });
            return Ok(false);
        }
        self.table.index.insert(token.to_string(), self.table.tokens.len());
        self.table.tokens.push(token.to_string());
        self.table.data.extend_from_slice(vector);
        Ok(true)
    }

    pub fn finish(self) -> (EmbeddingTable, Vec<LoadWarning>) {
        (self.table, self.warnings)
    }

    pub fn build(self) -> EmbeddingTable {
        self.table
    }
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` pairs, first occurrence winning.
    pub fn from_entries<'a, I>(dimension: usize, entries: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (&'a str, Vec<f64>)>,
    {
        let mut builder = TableBuilder::new(dimension);
        for (token, vector) in entries {
            builder.push(token, &vector)?;
        }
        Ok(builder.build())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Exact stored vector for `token`, case-sensitive.
    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.row(i))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Tokens in load order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    /// Parses the text format, logging duplicate-token warnings.
    pub fn load_text<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let (table, warnings) = Self::load_text_with_warnings(reader)?;
        log_warnings(&warnings);
        Ok(table)
    }

    pub fn load_text_with_warnings<R: BufRead>(
        reader: R,
    ) -> Result<(Self, Vec<LoadWarning>), EmbeddingError> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line.map_err(|e| text_err(1, format!("invalid UTF-8 or read error: {e}")))?,
            None => return Err(text_err(1, "missing header".into())),
        };
        let (vocab_size, dimension) =
            parse_header(&header).ok_or_else(|| text_err(1, format!("malformed header {header:?}")))?;

        let mut builder = TableBuilder::with_capacity(dimension, vocab_size);
        let mut vector = Vec::with_capacity(dimension);
        let mut entries = 0usize;
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line =
                line.map_err(|e| text_err(line_no, format!("invalid UTF-8 or read error: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_ascii_whitespace();
            let token = fields.next().unwrap_or_default();
            vector.clear();
            for field in fields {
                let value: f64 = field
                    .parse()
                    .map_err(|_| text_err(line_no, format!("invalid float {field:?}")))?;
                if !value.is_finite() {
                    return Err(text_err(line_no, format!("non-finite value {field:?}")));
                }
                vector.push(value);
            }
            if vector.len() != dimension {
                return Err(text_err(
                    line_no,
                    format!("expected {dimension} floats, got {}", vector.len()),
                ));
            }
            entries += 1;
            if entries > vocab_size {
                return Err(text_err(
                    line_no,
                    format!("more entries than the {vocab_size} declared in the header"),
                ));
            }
            builder.push(token, &vector)?;
        }
        if entries != vocab_size {
            return Err(text_err(
                entries + 2,
                format!("expected {vocab_size} entries, found {entries}"),
            ));
        }
        Ok(builder.finish())
    }

    /// Parses the binary format, logging duplicate-token warnings.
    pub fn load_binary<R: Read>(reader: R) -> Result<Self, EmbeddingError> {
        let (table, warnings) = Self::load_binary_with_warnings(reader)?;
        log_warnings(&warnings);
        Ok(table)
    }

    pub fn load_binary_with_warnings<R: Read>(
        reader: R,
    ) -> Result<(Self, Vec<LoadWarning>), EmbeddingError> {
        let mut input = CountingReader::new(io::BufReader::with_capacity(1 << 16, reader));

        let mut header = Vec::new();
        loop {
            match input.next_byte()? {
                Some(b'\n') => break,
                Some(b) => header.push(b),
                None => return Err(bin_err(input.offset, "unexpected end of stream in header")),
            }
            if header.len() > 64 {
                return Err(bin_err(input.offset, "malformed header"));
            }
        }
        let (vocab_size, dimension) = std::str::from_utf8(&header)
            .ok()
            .and_then(parse_header)
            .ok_or_else(|| bin_err(0, "malformed header"))?;

        let mut builder = TableBuilder::with_capacity(dimension, vocab_size);
        let mut token = Vec::new();
        let mut raw = vec![0u8; dimension * 4];
        let mut vector = vec![0f64; dimension];
        for entry in 1..=vocab_size {
            token.clear();
            loop {
                match input.next_byte()? {
                    // Some writers emit a newline after each vector.
                    Some(b'\n') if token.is_empty() => continue,
                    Some(b' ') if !token.is_empty() => break,
                    Some(b' ') => {
                        return Err(bin_err(input.offset, format!("empty token at entry {entry}")))
                    }
                    Some(b) => token.push(b),
                    None => {
                        return Err(bin_err(
                            input.offset,
                            format!("unexpected end of stream at entry {entry}"),
                        ))
                    }
                }
            }
            let token_str = std::str::from_utf8(&token).map_err(|_| {
                bin_err(input.offset, format!("token at entry {entry} is not valid UTF-8"))
            })?;
            if !input.fill(&mut raw)? {
                return Err(bin_err(
                    input.offset,
                    format!("unexpected end of stream at entry {entry}"),
                ));
            }
            for (slot, chunk) in vector.iter_mut().zip(raw.chunks_exact(4)) {
                let value = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !value.is_finite() {
                    return Err(bin_err(
                        input.offset,
                        format!("non-finite value at entry {entry}"),
                    ));
                }
                *slot = f64::from(value);
            }
            builder.push(token_str, &vector)?;
        }
        while let Some(b) = input.next_byte()? {
            if !b.is_ascii_whitespace() {
                return Err(bin_err(
                    input.offset - 1,
                    format!("header mismatch: data after the {vocab_size} declared entries"),
                ));
            }
        }
        Ok(builder.finish())
    }

    /// Writes the binary format with entries sorted by token.
    pub fn save_binary<W: Write>(&self, writer: W) -> Result<(), EmbeddingError> {
        if self.dimension == 0 {
            return Err(EmbeddingError::Invalid("dimension must be at least 1".into()));
        }
        let mut out = io::BufWriter::new(writer);
        write!(out, "{} {}\n", self.len(), self.dimension)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.tokens[a].cmp(&self.tokens[b]));
        let mut buf = Vec::with_capacity(self.dimension * 4);
        for i in order {
            let token = &self.tokens[i];
            if token.is_empty() || token.bytes().any(|b| b == b' ' || b == b'\n') {
                return Err(EmbeddingError::Invalid(format!(
                    "token {token:?} cannot be written in the binary format"
                )));
            }
            out.write_all(token.as_bytes())?;
            out.write_all(b" ")?;
            buf.clear();
            for &v in self.row(i) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes the text format with entries sorted by token.
    pub fn save_text<W: Write>(&self, writer: W) -> Result<(), EmbeddingError> {
        let mut out = io::BufWriter::new(writer);
        writeln!(out, "{} {}", self.len(), self.dimension)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.tokens[a].cmp(&self.tokens[b]));
        for i in order {
            out.write_all(self.tokens[i].as_bytes())?;
            for v in self.row(i) {
                write!(out, " {v}")?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads from a path, choosing the binary reader for `.bin` files.
    pub fn load_path(path: &std::path::Path) -> Result<Self, EmbeddingError> {
        let file = std::fs::File::open(path)?;
        if path.extension().is_some_and(|e| e == "bin") {
            Self::load_binary(file)
        } else {
            Self::load_text(io::BufReader::new(file))
        }
    }
}

/// Euclidean distance between two vectors of equal length.
pub fn euclidean(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut parts = line.split_ascii_whitespace();
    let vocab = parts.next()?.parse().ok()?;
    let dim = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((vocab, dim))
}

fn text_err(line: usize, message: String) -> EmbeddingError {
    EmbeddingError::Text { line, message }
}

fn bin_err(offset: u64, message: impl Into<String>) -> EmbeddingError {
    EmbeddingError::Binary {
        offset,
        message: message.into(),
    }
}

fn log_warnings(warnings: &[LoadWarning]) {
    for w in warnings {
        match w {
            LoadWarning::DuplicateToken { token, entry } => {
                warn!(token = %token, entry, "duplicate embedding token ignored")
            }
        }
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: BufRead> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn next_byte(&mut self) -> io::Result<Option<u8>> {
        let buf = self.inner.fill_buf()?;
        match buf.first() {
            Some(&b) => {
                self.inner.consume(1);
                self.offset += 1;
                Ok(Some(b))
            }
            None => Ok(None),
        }
    }

    /// Fills `out` completely; `false` on a short read at end of stream.
    fn fill(&mut self, out: &mut [u8]) -> io::Result<bool> {
        let mut filled = 0;
        while filled < out.len() {
            let n = self.inner.read(&mut out[filled..])?;
            if n == 0 {
                self.offset += filled as u64;
                return Ok(false);
            }
            filled += n;
        }
        self.offset += filled as u64;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, &[f64])]) -> EmbeddingTable {
        let dim = entries.first().map_or(1, |e| e.1.len());
        EmbeddingTable::from_entries(dim, entries.iter().map(|(t, v)| (*t, v.to_vec()))).unwrap()
    }

    #[test]
    fn parses_text_table() {
        let input = "2 3\ncat 0.1 0.2 0.3\ndog 1 0 0\n";
        let t = EmbeddingTable::load_text(input.as_bytes()).unwrap();
        assert_eq!(t.dimension(), 3);
        assert_eq!(t.len(), 2);
        assert_eq!(t.lookup("cat").unwrap(), &[0.1, 0.2, 0.3]);
        assert_eq!(t.lookup("dog").unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_text_table_keeps_dimension() {
        let t = EmbeddingTable::load_text("0 5\n".as_bytes()).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.dimension(), 5);
    }

    #[test]
    fn short_line_names_line_number() {
        let err = EmbeddingTable::load_text("1 3\ncat 0.1 0.2\n".as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "line 2: expected 3 floats, got 2");
    }

    #[test]
    fn malformed_header_and_non_finite_values() {
        let err = EmbeddingTable::load_text("two 3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 1: malformed header"), "{err}");
        let err = EmbeddingTable::load_text("1 2\nx NaN 1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 2: non-finite"), "{err}");
        let err = EmbeddingTable::load_text("1 2\nx inf 1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 2: non-finite"), "{err}");
    }

    #[test]
    fn duplicate_tokens_first_wins() {
        let input = "3 1\na 1\nb 2\na 3\n";
        let (t, warnings) = EmbeddingTable::load_text_with_warnings(input.as_bytes()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.lookup("a").unwrap(), &[1.0]);
        assert_eq!(
            warnings,
            vec![LoadWarning::DuplicateToken { token: "a".into(), entry: 3 }]
        );
    }

    #[test]
    fn entry_count_must_match_header() {
        let err = EmbeddingTable::load_text("2 1\na 1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("expected 2 entries, found 1"), "{err}");
    }

    #[test]
    fn binary_round_trip() {
        let t = table(&[("cat", &[0.5, -1.0])]);
        let mut bytes = Vec::new();
        t.save_binary(&mut bytes).unwrap();
        let back = EmbeddingTable::load_binary(bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        back.save_binary(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn binary_minimal_entry() {
        let mut bytes = b"1 2\na ".to_vec();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let t = EmbeddingTable::load_binary(bytes.as_slice()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.lookup("a").unwrap(), &[1.5, -2.0]);
    }

    #[test]
    fn binary_truncation_is_reported() {
        let mut bytes = b"1 2\na ".to_vec();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        let err = EmbeddingTable::load_binary(bytes.as_slice()).unwrap_err();
        assert!(
            err.to_string().contains("unexpected end of stream at entry 1"),
            "{err}"
        );
        match err {
            EmbeddingError::Binary { offset, .. } => assert_eq!(offset, 10),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn binary_trailing_data_is_header_mismatch() {
        let mut bytes = b"1 1\na ".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(b"\nb ");
        let err = EmbeddingTable::load_binary(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("header mismatch"), "{err}");
    }

    #[test]
    fn binary_accepts_newline_separated_entries() {
        let mut bytes = b"2 1\na ".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(b"\nb ");
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.push(b'\n');
        let t = EmbeddingTable::load_binary(bytes.as_slice()).unwrap();
        assert_eq!(t.lookup("b").unwrap(), &[2.0]);
    }

    #[test]
    fn save_is_deterministic_and_sorted() {
        let t = table(&[("zeta", &[1.0]), ("alpha", &[0.0])]);
        let mut a = Vec::new();
        let mut b = Vec::new();
        t.save_binary(&mut a).unwrap();
        t.save_binary(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"2 1\nalpha "));
    }

    #[test]
    fn save_empty_table_writes_header_only() {
        let t = TableBuilder::new(4).build();
        let mut out = Vec::new();
        t.save_binary(&mut out).unwrap();
        assert_eq!(out, b"0 4\n");
    }

    #[test]
    fn save_round_trips_through_text() {
        let t = table(&[("a", &[0.25, -3.5]), ("b", &[1e-7, 2.0])]);
        let mut out = Vec::new();
        t.save_text(&mut out).unwrap();
        assert_eq!(EmbeddingTable::load_text(out.as_slice()).unwrap(), t);
    }

    #[test]
    fn lookup_is_case_sensitive() {
        let t = table(&[("cat", &[1.0, 2.0])]);
        assert_eq!(t.lookup("cat").unwrap(), &[1.0, 2.0]);
        assert!(t.lookup("Cat").is_none());
        assert!(TableBuilder::new(3).build().lookup("x").is_none());
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean(&[0.0, 3.0], &[4.0, 0.0]).unwrap(), 5.0);
        assert_eq!(euclidean(&[1.5, 2.5], &[1.5, 2.5]).unwrap(), 0.0);
        assert_eq!(euclidean(&[1.0], &[-1.0]).unwrap(), 2.0);
        assert!(euclidean(&[1.0], &[1.0, 2.0]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn vec3() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-100.0f64..100.0, 3)
        }

        proptest! {
            #[test]
            fn euclidean_is_symmetric_and_triangular(u in vec3(), v in vec3(), w in vec3()) {
                let uv = euclidean(&u, &v).unwrap();
                prop_assert_eq!(uv, euclidean(&v, &u).unwrap());
                let uw = euclidean(&u, &w).unwrap();
                let vw = euclidean(&v, &w).unwrap();
                prop_assert!(uw <= (uv + vw) * (1.0 + 1e-12));
            }

            #[test]
            fn binary_round_trip_is_exact(
                entries in prop::collection::btree_map("[a-z]{1,8}", prop::collection::vec(-1e3f32..1e3, 4), 0..20)
            ) {
                let t = EmbeddingTable::from_entries(
                    4,
                    entries.iter().map(|(k, v)| (k.as_str(), v.iter().map(|&x| f64::from(x)).collect())),
                ).unwrap();
                let mut bytes = Vec::new();
                t.save_binary(&mut bytes).unwrap();
                let back = EmbeddingTable::load_binary(bytes.as_slice()).unwrap();
                prop_assert_eq!(&back, &t);
                let mut again = Vec::new();
                back.save_binary(&mut again).unwrap();
                prop_assert_eq!(bytes, again);
            }
        }
    }
}
