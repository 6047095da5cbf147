//! Word-piece style tokenizer with a text sidecar table.
//!
//! Ids 0..4 are reserved (`pad`, `bos`, `eos`, `unk`). Every other id is
//! either a piece (a non-empty string) or an unused slot. Encoding takes the
//! longest matching piece at each position; characters outside the table
//! become `unk`. For text over the covered alphabet, decoding the encoding
//! returns the input unchanged.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::ModelError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const N_SPECIAL: usize = 4;

const SPECIAL_NAMES: [&str; N_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const SIDECAR_MAGIC: &str = "tbarrier-tokenizer";
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Entry {
    Special,
    Piece(String),
    Unused,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    entries: Vec<Entry>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl Tokenizer {
    fn from_entries(entries: Vec<Entry>) -> Result<Self, ModelError> {
        if entries.len() < N_SPECIAL {
            return Err(ModelError::InvalidConfig(
                "tokenizer needs at least the four reserved ids".into(),
            ));
        }
        let mut index = HashMap::new();
        let mut max_piece_chars = 1;
        for (id, e) in entries.iter().enumerate() {
            match e {
                Entry::Special if id >= N_SPECIAL => {
                    return Err(ModelError::InvalidConfig(format!(
                        "special entry at non-reserved id {id}"
                    )))
                }
                Entry::Piece(p) => {
                    if id < N_SPECIAL || p.is_empty() {
                        return Err(ModelError::InvalidConfig(format!(
                            "invalid piece at id {id}"
                        )));
                    }
                    if index.insert(p.clone(), id as u32).is_some() {
                        return Err(ModelError::InvalidConfig(format!("duplicate piece {p:?}")));
                    }
                    max_piece_chars = max_piece_chars.max(p.chars().count());
                }
                _ => {}
            }
        }
        Ok(Self {
            entries,
            index,
            max_piece_chars,
        })
    }

    /// Printable ASCII plus newline, truncated or padded to `vocab_size`.
    pub fn basic(vocab_size: usize) -> Result<Self, ModelError> {
        let alphabet = std::iter::once('\n').chain((0x20u8..0x7f).map(char::from));
        Self::from_pieces(vocab_size, alphabet.map(String::from))
    }

    fn from_pieces(
        vocab_size: usize,
        pieces: impl IntoIterator<Item = String>,
    ) -> Result<Self, ModelError> {
        let mut entries: Vec<Entry> = (0..N_SPECIAL).map(|_| Entry::Special).collect();
        entries.extend(
            pieces
                .into_iter()
                .take(vocab_size.saturating_sub(N_SPECIAL))
                .map(Entry::Piece),
        );
        entries.resize(vocab_size.max(N_SPECIAL), Entry::Unused);
        Self::from_entries(entries)
    }

    /// Learns a vocabulary from `corpus`: single characters by descending
    /// frequency, then pair merges until `vocab_size` is reached. Newlines
    /// are never merged so they stay usable as a stop token.
    pub fn train(corpus: &[String], vocab_size: usize) -> Result<Self, ModelError> {
        let capacity = vocab_size.saturating_sub(N_SPECIAL);
        let mut line_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for line in corpus {
            *line_counts.entry(line.as_str()).or_insert(0) += 1;
        }

        let mut char_freq: BTreeMap<char, u64> = BTreeMap::new();
        for (line, n) in &line_counts {
            for c in line.chars() {
                *char_freq.entry(c).or_insert(0) += n;
            }
        }
        let mut chars: Vec<(char, u64)> = char_freq.into_iter().collect();
        // '\n' always gets a slot so generation can stop
        chars.sort_by(|a, b| {
            (b.0 == '\n')
                .cmp(&(a.0 == '\n'))
                .then(b.1.cmp(&a.1))
                .then(a.0.cmp(&b.0))
        });
        chars.truncate(capacity);
        let mut pieces: Vec<String> = chars.iter().map(|(c, _)| c.to_string()).collect();
        let known: std::collections::HashSet<char> = chars.iter().map(|(c, _)| *c).collect();

        // words as sequences of pieces; unknown characters split segments
        let mut seqs: Vec<(Vec<String>, u64)> = Vec::new();
        for (line, n) in &line_counts {
            let mut cur = Vec::new();
            for c in line.chars() {
                if known.contains(&c) {
                    cur.push(c.to_string());
                } else if !cur.is_empty() {
                    seqs.push((std::mem::take(&mut cur), *n));
                }
            }
            if !cur.is_empty() {
                seqs.push((cur, *n));
            }
        }

        while pieces.len() < capacity {
            let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (seq, n) in &seqs {
                for w in seq.windows(2) {
                    if w[0] == "\n" || w[1] == "\n" {
                        continue;
                    }
                    *pair_counts
                        .entry((w[0].as_str(), w[1].as_str()))
                        .or_insert(0) += n;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .map(|((a, b), _)| (a.to_string(), b.to_string()));
            let Some((a, b)) = best else { break };
            let merged = format!("{a}{b}");
            for (seq, _) in &mut seqs {
                let mut out = Vec::with_capacity(seq.len());
                let mut i = 0;
                while i < seq.len() {
                    if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut seq[i]));
                        i += 1;
                    }
                }
                *seq = out;
            }
            if !pieces.contains(&merged) {
                pieces.push(merged);
            }
        }
        Self::from_pieces(vocab_size, pieces)
    }

    pub fn vocab_size(&self) -> usize {
        self.entries.len()
    }

    /// Text contributed by a token when decoding; empty for reserved and
    /// unused ids.
    pub fn token_text(&self, id: u32) -> &str {
        match self.entries.get(id as usize) {
            Some(Entry::Piece(p)) => p,
            _ => "",
        }
    }

    pub fn piece_id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// Ids of every piece containing a newline.
    pub fn newline_ids(&self) -> Vec<u32> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(id, e)| match e {
                Entry::Piece(p) if p.contains('\n') => Some(id as u32),
                _ => None,
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut ids = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let mut matched = None;
            let longest = self.max_piece_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                let end = chars.get(i + len).map_or(text.len(), |&(b, _)| b);
                if let Some(&id) = self.index.get(&text[start..end]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    i += len;
                }
                None => {
                    ids.push(UNK);
                    i += 1;
                }
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.token_text(id)).collect()
    }

    /// Whether every character of `text` is covered by a single-character
    /// piece, which guarantees `decode(encode(text)) == text`.
    pub fn covers(&self, text: &str) -> bool {
        let mut buf = [0u8; 4];
        text.chars()
            .all(|c| self.index.contains_key(&*c.encode_utf8(&mut buf)))
    }

    /// Stable identifier derived from the table contents.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_sidecar().as_bytes());
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("tbarrier-wp-{}-{hex}", self.vocab_size())
    }

    pub fn to_sidecar(&self) -> String {
        let mut out = format!(
            "{SIDECAR_MAGIC} v{SIDECAR_VERSION} {}\n",
            self.entries.len()
        );
        for (id, e) in self.entries.iter().enumerate() {
            match e {
                Entry::Special => writeln!(out, "{id}\tspecial\t{}", SPECIAL_NAMES[id]),
                Entry::Piece(p) => writeln!(out, "{id}\tpiece\t{}", escape(p)),
                Entry::Unused => writeln!(out, "{id}\tunused\t"),
            }
            .expect("write to string");
        }
        out
    }

    pub fn from_sidecar(text: &str) -> Result<Self, ModelError> {
        let bad = |line: usize, msg: &str| ModelError::Format {
            offset: line as u64,
            message: format!("tokenizer table line {line}: {msg}"),
        };
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != SIDECAR_MAGIC {
            return Err(bad(1, "missing tokenizer header"));
        }
        if parts[1] != format!("v{SIDECAR_VERSION}") {
            return Err(bad(1, "unsupported tokenizer table version"));
        }
        let size: usize = parts[2]
            .parse()
            .map_err(|_| bad(1, "bad vocabulary size"))?;
        let mut entries = Vec::with_capacity(size);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            let (Some(id), Some(kind), Some(payload)) = (cols.next(), cols.next(), cols.next())
            else {
                return Err(bad(lineno, "expected three tab-separated columns"));
            };
            if id.parse::<usize>().ok() != Some(entries.len()) {
                return Err(bad(lineno, "ids must be contiguous from 0"));
            }
            entries.push(match kind {
                "special" => Entry::Special,
                "unused" => Entry::Unused,
                "piece" => {
                    Entry::Piece(unescape(payload).ok_or_else(|| bad(lineno, "bad escape"))?)
                }
                _ => return Err(bad(lineno, "unknown entry kind")),
            });
        }
        if entries.len() != size {
            return Err(bad(1, "entry count does not match header"));
        }
        Self::from_entries(entries)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match chars.next()? {
            '\\' => '\\',
            'n' => '\n',
            't' => '\t',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(out)
}
