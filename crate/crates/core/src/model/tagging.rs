//! BIO tags over source units: `O`, then `B-t`/`I-t` for every error type.

use crate::codec::EncodedSource;
use crate::tensor::Mat;

pub const OUTSIDE: usize = 0;

pub fn tag_count(types: usize) -> usize {
    2 * types + 1
}

pub fn begin(t: usize) -> usize {
    1 + 2 * t
}

pub fn inside(t: usize) -> usize {
    2 + 2 * t
}

/// Type of a `B-t`/`I-t` tag.
pub fn tag_type(tag: usize) -> Option<usize> {
    (tag != OUTSIDE).then(|| (tag - 1) / 2)
}

/// Gold tags for the units of `enc`: evidence units are tagged with `t`, a
/// run of consecutive evidence units opens with `B`.
pub fn bio_tags(enc: &EncodedSource, evidence_words: &[usize], t: usize) -> Vec<usize> {
    let marked = enc.expand_words(evidence_words);
    let mut tags = vec![OUTSIDE; enc.units.len()];
    for &u in &marked {
        tags[u] = if u > 0 && tags[u - 1] != OUTSIDE {
            inside(t)
        } else {
            begin(t)
        };
    }
    tags
}

/// Evidence units (argmax tag other than `O`) and the type with the largest
/// total `B`+`I` probability across units.
pub fn decode_tags(dists: &Mat, types: usize) -> (Vec<usize>, Option<usize>) {
    let mut units = Vec::new();
    let mut mass = vec![0.0; types];
    for r in 0..dists.rows {
        let row = dists.row(r);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &p)| if p > row[b] { i } else { b });
        if best != OUTSIDE {
            units.push(r);
        }
        for (t, m) in mass.iter_mut().enumerate() {
            *m += row[begin(t)] + row[inside(t)];
        }
    }
    let ty = mass
        .iter()
        .enumerate()
        .fold(None, |b: Option<usize>, (t, &m)| match b {
            Some(bt) if mass[bt] >= m => Some(bt),
            _ => Some(t),
        });
    (units, ty)
}
