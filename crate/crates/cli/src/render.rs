//! Column-aligned text view of a masked batch.

use cmlm::encoder::trim_padding;
use cmlm::masking::{CrmBatch, MaskedSequence};
use cmlm::text::{TokenId, TokenSequence, Vocabulary};

fn cell(vocab: &Vocabulary, id: TokenId, selected: bool) -> String {
    let tok = vocab.token(id).unwrap_or("?");
    if selected {
        format!("[{tok}]")
    } else {
        tok.to_string()
    }
}

fn row(vocab: &Vocabulary, ids: &[TokenId], selected: Option<&[bool]>, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| cell(vocab, ids[i], selected.is_some_and(|s| s[i])))
        .collect()
}

fn view_row(vocab: &Vocabulary, v: &MaskedSequence, n: usize) -> Vec<String> {
    row(vocab, &v.corrupted, Some(&v.pattern.selected), n)
}

/// Rows `orig`, `T^0`, `T^1`, ... over the non-padding positions, one column
/// per position, each column as wide as its widest cell.
pub fn aligned_views(seq: &TokenSequence, batch: &CrmBatch, vocab: &Vocabulary) -> String {
    let n = trim_padding(seq.ids()).len();
    let mut rows = vec![("orig".to_string(), row(vocab, seq.ids(), None, n))];
    rows.push(("T^0".into(), view_row(vocab, &batch.anchor, n)));
    for (k, v) in batch.views.iter().enumerate() {
        rows.push((format!("T^{}", k + 1), view_row(vocab, v, n)));
    }
    let widths: Vec<usize> = (0..n)
        .map(|i| rows.iter().map(|(_, r)| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (label, cells) in rows {
        let mut line = format!("{label:<label_w$} ");
        for (c, w) in cells.iter().zip(&widths) {
            line.push(' ');
            line.push_str(&format!("{c:<w$}"));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
