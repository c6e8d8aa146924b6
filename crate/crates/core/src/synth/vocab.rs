//! Token-id layout and embedding-dimension layout for grid tasks.
//!
//! The vocabulary encodes a rows-by-cols grid of visual cells, each carrying
//! one symbol, plus query tokens (one per cell), answer symbol tokens, a
//! prompt prefix token, and the reserved end-of-sequence id:
//!
//! ```text
//! 0                  prefix token
//! 1 ..= P            query token for cell c (id 1 + c)
//! P+1 ..= P+S        symbol token (id 1 + P + s)
//! P+S+1 ..           cell token for (cell c, symbol s): 1 + P + S + c*S + s
//! vocab_size - 1     end-of-sequence
//! ```

use serde::{Deserialize, Serialize};

/// Vocabulary arithmetic for a symbol grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridVocab {
    pub rows: usize,
    pub cols: usize,
    pub symbols: usize,
}

/// What a vocabulary id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Prefix,
    Query { cell: usize },
    Symbol { symbol: usize },
    Cell { cell: usize, symbol: usize },
    Eos,
}

impl GridVocab {
    pub fn new(rows: usize, cols: usize, symbols: usize) -> Self {
        Self { rows, cols, symbols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.cells() + self.symbols + self.cells() * self.symbols
    }

    pub fn prefix_token(&self) -> usize {
        0
    }

    pub fn query_token(&self, cell: usize) -> usize {
        debug_assert!(cell < self.cells());
        1 + cell
    }

    pub fn symbol_token(&self, symbol: usize) -> usize {
        debug_assert!(symbol < self.symbols);
        1 + self.cells() + symbol
    }

    pub fn cell_token(&self, cell: usize, symbol: usize) -> usize {
        debug_assert!(cell < self.cells() && symbol < self.symbols);
        1 + self.cells() + self.symbols + cell * self.symbols + symbol
    }

    pub fn eos_token(&self) -> usize {
        self.vocab_size() - 1
    }

    pub fn decode(&self, id: usize) -> Option<TokenKind> {
        let p = self.cells();
        let s = self.symbols;
        if id == 0 {
            return Some(TokenKind::Prefix);
        }
        if id <= p {
            return Some(TokenKind::Query { cell: id - 1 });
        }
        if id <= p + s {
            return Some(TokenKind::Symbol { symbol: id - 1 - p });
        }
        let cell_base = 1 + p + s;
        if id < cell_base + p * s {
            let off = id - cell_base;
            return Some(TokenKind::Cell {
                cell: off / s,
                symbol: off % s,
            });
        }
        (id == self.eos_token()).then_some(TokenKind::Eos)
    }
}

/// Where each signal lives in the embedding space. Disjoint one-hot
/// subspaces keep the analytic attention gaps exact.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DimLayout {
    /// Query-position one-hot, width `cells` (query tokens).
    pub qpos: usize,
    /// Cell-position one-hot, width `cells` (visual tokens; attention keys).
    pub cpos: usize,
    /// Cell-symbol one-hot, width `symbols` (visual tokens; attention values).
    pub csym: usize,
    /// Emitted-symbol one-hot, width `symbols` (generated symbol tokens).
    pub esym: usize,
    /// Retrieved-symbol accumulator, width `symbols` (written by designated
    /// heads, read by the unembedding).
    pub ret: usize,
    /// Marker on symbol tokens; the end-of-sequence trigger.
    pub m_done: usize,
    /// Marker on query tokens.
    pub m_query: usize,
    /// Total dimensions the construction occupies.
    pub required: usize,
}

impl DimLayout {
    pub fn new(cells: usize, symbols: usize) -> Self {
        let qpos = 0;
        let cpos = qpos + cells;
        let csym = cpos + cells;
        let esym = csym + symbols;
        let ret = esym + symbols;
        let m_done = ret + symbols;
        let m_query = m_done + 1;
        Self {
            qpos,
            cpos,
            csym,
            esym,
            ret,
            m_done,
            m_query,
            required: m_query + 1,
        }
    }
}
