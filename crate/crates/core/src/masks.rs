//! Attention admissibility masks.
//!
//! Three families cover every attention pattern the system uses:
//!
//! * block-causal self-attention over frame chunks ([`causal_chunk_mask`]),
//! * the same with a randomly hidden span of recent history per query chunk
//!   ([`pca_mask`]), which turns next-chunk prediction into
//!   predict-N-chunks-ahead for the affected queries, and
//! * cross-attention masks tying each frame to the global prompt tokens plus
//!   its own segment's local tokens ([`temporal_cross_mask`]), with a variant
//!   that selects the segment of a *future* target frame ([`kf_cross_mask`]).
//!
//! Masks are dense row-major booleans at frame granularity; the model expands
//! them to token granularity when frames carry more than one token.

use rand::Rng;

pub type MaskResult<T> = Result<T, MaskError>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error("mask row {row} admits no keys")]
    EmptyRow { row: usize },
    #[error("mask dimensions must be nonzero (got {rows}x{cols})")]
    ZeroDim { rows: usize, cols: usize },
    #[error("bits length {got} does not match {rows}x{cols}")]
    BitsLength { rows: usize, cols: usize, got: usize },
    #[error("span at chunk {query_chunk} hides {hidden_count} of {num_chunks} chunks")]
    BadSpan {
        query_chunk: usize,
        hidden_count: usize,
        num_chunks: usize,
    },
    #[error("frame {frame} lies outside every segment")]
    FrameOutsideSegments { frame: usize },
    #[error("segment list invalid: {reason}")]
    BadSegments { reason: String },
    #[error("token range {start}..{end} exceeds {num_tokens} text tokens")]
    TokenRange {
        start: usize,
        end: usize,
        num_tokens: usize,
    },
    #[error("hstack row mismatch: {left} vs {right}")]
    HstackRows { left: usize, right: usize },
}

/// Dense boolean query×key admissibility matrix. `true` means attend.
/// Construction guarantees every query row admits at least one key.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AttentionMask({}x{})\n{}", self.rows, self.cols, self.ascii())
    }
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> MaskResult<AttentionMask> {
        if rows == 0 || cols == 0 {
            return Err(MaskError::ZeroDim { rows, cols });
        }
        if bits.len() != rows * cols {
            return Err(MaskError::BitsLength {
                rows,
                cols,
                got: bits.len(),
            });
        }
        let mask = AttentionMask { rows, cols, bits };
        mask.check_rows()?;
        Ok(mask)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> MaskResult<AttentionMask> {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        AttentionMask::new(rows, cols, bits)
    }

    /// All-true mask (bidirectional attention).
    pub fn all_true(rows: usize, cols: usize) -> AttentionMask {
        AttentionMask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    /// Random mask for tests; each row is forced to keep at least one key.
    pub fn random(rng: &mut impl Rng, rows: usize, cols: usize, p_true: f64) -> MaskResult<AttentionMask> {
        let mut bits = vec![false; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                bits[i * cols + j] = rng.random_bool(p_true);
            }
            if !bits[i * cols..(i + 1) * cols].iter().any(|&b| b) {
                let j = rng.random_range(0..cols);
                bits[i * cols + j] = true;
            }
        }
        AttentionMask::new(rows, cols, bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    /// Repeat every row `row_rep` times and every column `col_rep` times;
    /// turns a frame-level mask into a token-level one.
    pub fn expand(&self, row_rep: usize, col_rep: usize) -> AttentionMask {
        let rows = self.rows * row_rep;
        let cols = self.cols * col_rep;
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(self.get(i / row_rep, j / col_rep));
            }
        }
        AttentionMask { rows, cols, bits }
    }

    /// Concatenate key columns of two masks with equal query counts.
    pub fn hstack(&self, other: &AttentionMask) -> MaskResult<AttentionMask> {
        if self.rows != other.rows {
            return Err(MaskError::HstackRows {
                left: self.rows,
                right: other.rows,
            });
        }
        let cols = self.cols + other.cols;
        let mut bits = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            bits.extend_from_slice(&self.bits[i * self.cols..(i + 1) * self.cols]);
            bits.extend_from_slice(&other.bits[i * other.cols..(i + 1) * other.cols]);
        }
        Ok(AttentionMask {
            rows: self.rows,
            cols,
            bits,
        })
    }

    /// Grid rendering: `#` = attend, `.` = blocked; one line per query row.
    pub fn ascii(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(if self.get(i, j) { '#' } else { '.' });
            }
            if i + 1 < self.rows {
                out.push('\n');
            }
        }
        out
    }

    fn check_rows(&self) -> MaskResult<()> {
        for i in 0..self.rows {
            if !self.bits[i * self.cols..(i + 1) * self.cols].iter().any(|&b| b) {
                return Err(MaskError::EmptyRow { row: i });
            }
        }
        Ok(())
    }
}

/// One hidden span: the `hidden_count` chunks immediately preceding
/// `query_chunk` are blocked for that chunk's queries. `hidden_count = N`
/// makes the query's task "predict N chunks past its last visible history".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanSpec {
    pub query_chunk: usize,
    pub hidden_count: usize,
}

/// Chunk index of a frame.
#[inline]
pub fn chunk_of(frame: usize, chunk_size: usize) -> usize {
    frame / chunk_size
}

/// Block-causal self-attention: frame i attends frame j iff
/// `chunk(j) ≤ chunk(i)`; frames within a chunk see each other both ways.
/// A trailing short chunk counts as a full chunk.
pub fn causal_chunk_mask(num_frames: usize, chunk_size: usize) -> MaskResult<AttentionMask> {
    if num_frames == 0 || chunk_size == 0 {
        return Err(MaskError::ZeroDim {
            rows: num_frames,
            cols: chunk_size,
        });
    }
    AttentionMask::from_fn(num_frames, num_frames, |i, j| {
        chunk_of(j, chunk_size) <= chunk_of(i, chunk_size)
    })
}

/// [`causal_chunk_mask`] with hidden spans applied per query chunk. Each span
/// blocks the `hidden_count` chunks immediately before its query chunk — the
/// most recent history — leaving a visible prefix, a blocked gap, and the
/// query's own chunk. `hidden_count == query_chunk` hides all history.
pub fn pca_mask(num_frames: usize, chunk_size: usize, spans: &[SpanSpec]) -> MaskResult<AttentionMask> {
    let base = causal_chunk_mask(num_frames, chunk_size)?;
    let num_chunks = num_frames.div_ceil(chunk_size);
    let mut bits = Vec::with_capacity(num_frames * num_frames);
    for i in 0..num_frames {
        for j in 0..num_frames {
            bits.push(base.get(i, j));
        }
    }
    for span in spans {
        if span.query_chunk >= num_chunks || span.hidden_count > span.query_chunk {
            return Err(MaskError::BadSpan {
                query_chunk: span.query_chunk,
                hidden_count: span.hidden_count,
                num_chunks,
            });
        }
        let blocked_from = span.query_chunk - span.hidden_count;
        for i in 0..num_frames {
            if chunk_of(i, chunk_size) != span.query_chunk {
                continue;
            }
            for j in 0..num_frames {
                let cj = chunk_of(j, chunk_size);
                if cj >= blocked_from && cj < span.query_chunk {
                    bits[i * num_frames + j] = false;
                }
            }
        }
    }
    AttentionMask::new(num_frames, num_frames, bits)
}

/// Draw spans for one training window: each chunk (except chunk 0, which has
/// no history) is independently blocked with probability `p_block`, hiding a
/// uniform count in `[1, min(max_hidden, query_chunk)]`.
pub fn sample_spans(
    rng: &mut impl Rng,
    num_chunks: usize,
    p_block: f64,
    max_hidden: usize,
) -> Vec<SpanSpec> {
    let mut spans = Vec::new();
    for q in 1..num_chunks {
        if rng.random_bool(p_block) {
            let hi = max_hidden.min(q);
            let hidden_count = rng.random_range(1..=hi);
            spans.push(SpanSpec {
                query_chunk: q,
                hidden_count,
            });
        }
    }
    spans
}

/// One prompt segment: frames `[frame_start, frame_end)` read local text
/// tokens `[token_start, token_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub frame_start: usize,
    pub frame_end: usize,
    pub token_start: usize,
    pub token_end: usize,
}

/// Frame → prompt-segment geometry. Segments are disjoint, ordered, and
/// cover `[0, num_frames)`; token ranges are disjoint and disjoint from the
/// global range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    segments: Vec<Segment>,
    global_token_range: (usize, usize),
    num_frames: usize,
}

impl SegmentMap {
    pub fn new(
        segments: Vec<Segment>,
        global_token_range: (usize, usize),
    ) -> MaskResult<SegmentMap> {
        if segments.is_empty() {
            return Err(MaskError::BadSegments {
                reason: "no segments".into(),
            });
        }
        let mut cursor = 0;
        for (idx, s) in segments.iter().enumerate() {
            if s.frame_start != cursor || s.frame_end <= s.frame_start {
                return Err(MaskError::BadSegments {
                    reason: format!(
                        "segment {idx} frames {}..{} leave a gap or are empty (expected start {cursor})",
                        s.frame_start, s.frame_end
                    ),
                });
            }
            if s.token_end < s.token_start {
                return Err(MaskError::BadSegments {
                    reason: format!("segment {idx} token range reversed"),
                });
            }
            cursor = s.frame_end;
        }
        // token ranges (including global) must not overlap
        let mut ranges: Vec<(usize, usize)> = segments
            .iter()
            .map(|s| (s.token_start, s.token_end))
            .filter(|(a, b)| a != b)
            .collect();
        if global_token_range.1 > global_token_range.0 {
            ranges.push(global_token_range);
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(MaskError::BadSegments {
                    reason: format!("token ranges {:?} and {:?} overlap", w[0], w[1]),
                });
            }
        }
        Ok(SegmentMap {
            num_frames: cursor,
            segments,
            global_token_range,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn global_token_range(&self) -> (usize, usize) {
        self.global_token_range
    }

    /// Index of the segment containing `frame`.
    pub fn segment_of(&self, frame: usize) -> MaskResult<usize> {
        self.segments
            .iter()
            .position(|s| s.frame_start <= frame && frame < s.frame_end)
            .ok_or(MaskError::FrameOutsideSegments { frame })
    }

    fn check_tokens(&self, num_text_tokens: usize) -> MaskResult<()> {
        let (gs, ge) = self.global_token_range;
        if ge > num_text_tokens {
            return Err(MaskError::TokenRange {
                start: gs,
                end: ge,
                num_tokens: num_text_tokens,
            });
        }
        for s in &self.segments {
            if s.token_end > num_text_tokens {
                return Err(MaskError::TokenRange {
                    start: s.token_start,
                    end: s.token_end,
                    num_tokens: num_text_tokens,
                });
            }
        }
        Ok(())
    }
}

/// Cross-attention mask: frame f attends to the global token range plus the
/// local tokens of the segment containing f, nothing else.
pub fn temporal_cross_mask(
    num_frames: usize,
    seg: &SegmentMap,
    num_text_tokens: usize,
) -> MaskResult<AttentionMask> {
    seg.check_tokens(num_text_tokens)?;
    let mut rows = Vec::with_capacity(num_frames);
    for f in 0..num_frames {
        let s = &seg.segments()[seg.segment_of(f)?];
        rows.push((s.token_start, s.token_end));
    }
    let (gs, ge) = seg.global_token_range();
    AttentionMask::from_fn(num_frames, num_text_tokens, |i, j| {
        let (ls, le) = rows[i];
        (gs <= j && j < ge) || (ls <= j && j < le)
    })
}

/// Single-row cross-attention mask for a keyframe query: it attends to the
/// global tokens plus the local tokens of the segment containing the KF's
/// *target* frame, which may lie ahead of the current streaming position.
pub fn kf_cross_mask(
    seg: &SegmentMap,
    kf_frame_index: usize,
    num_text_tokens: usize,
) -> MaskResult<AttentionMask> {
    seg.check_tokens(num_text_tokens)?;
    let s = &seg.segments()[seg.segment_of(kf_frame_index)?];
    let (gs, ge) = seg.global_token_range();
    AttentionMask::from_fn(1, num_text_tokens, |_, j| {
        (gs <= j && j < ge) || (s.token_start <= j && j < s.token_end)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn visible_chunks(mask: &AttentionMask, row: usize, chunk_size: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..mask.cols())
            .filter(|&j| mask.get(row, j))
            .map(|j| chunk_of(j, chunk_size))
            .collect();
        out.dedup();
        out
    }

    #[test]
    fn causal_chunk1_is_lower_triangular() {
        let m = causal_chunk_mask(3, 1).unwrap();
        assert_eq!(m.ascii(), "#..\n##.\n###");
    }

    #[test]
    fn causal_chunk2_has_bidirectional_blocks() {
        let m = causal_chunk_mask(4, 2).unwrap();
        assert_eq!(m.ascii(), "##..\n##..\n####\n####");
    }

    #[test]
    fn causal_matches_predicate_oracle_21_by_3() {
        let m = causal_chunk_mask(21, 3).unwrap();
        for i in 0..21 {
            for j in 0..21 {
                assert_eq!(m.get(i, j), j / 3 <= i / 3, "({i},{j})");
            }
        }
    }

    #[test]
    fn causal_rejects_empty() {
        assert!(causal_chunk_mask(0, 3).is_err());
        assert!(causal_chunk_mask(3, 0).is_err());
    }

    #[test]
    fn pca_no_spans_equals_causal() {
        let a = pca_mask(21, 3, &[]).unwrap();
        let b = causal_chunk_mask(21, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pca_blocks_recent_history() {
        // 7 chunks, query chunk 5 hiding 3 → sees {0,1,5}
        let m = pca_mask(21, 3, &[SpanSpec { query_chunk: 5, hidden_count: 3 }]).unwrap();
        for row in 15..18 {
            assert_eq!(visible_chunks(&m, row, 3), vec![0, 1, 5]);
        }
        // other chunks untouched
        assert_eq!(visible_chunks(&m, 12, 3), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn pca_can_hide_all_history() {
        let m = pca_mask(21, 3, &[SpanSpec { query_chunk: 6, hidden_count: 6 }]).unwrap();
        for row in 18..21 {
            assert_eq!(visible_chunks(&m, row, 3), vec![6]);
        }
    }

    #[test]
    fn pca_rejects_overlong_span() {
        let err = pca_mask(21, 3, &[SpanSpec { query_chunk: 2, hidden_count: 3 }]).unwrap_err();
        assert!(matches!(err, MaskError::BadSpan { .. }));
    }

    #[test]
    fn pca_rows_are_prefix_plus_own_chunk() {
        // property: visible set = contiguous chunk prefix ∪ {own chunk}
        let mut rng = substream(17, "spans");
        for _ in 0..50 {
            let num_frames = rng.random_range(1..=24usize);
            let chunk_size = rng.random_range(1..=3usize);
            let chunks = num_frames.div_ceil(chunk_size);
            let spans = sample_spans(&mut rng, chunks, 0.7, 6);
            let m = pca_mask(num_frames, chunk_size, &spans).unwrap();
            for i in 0..num_frames {
                let vis = visible_chunks(&m, i, chunk_size);
                let own = chunk_of(i, chunk_size);
                assert_eq!(*vis.last().unwrap(), own);
                let prefix = &vis[..vis.len() - 1];
                for (k, &c) in prefix.iter().enumerate() {
                    assert_eq!(c, k, "prefix must be contiguous from chunk 0");
                }
            }
        }
    }

    #[test]
    fn sample_spans_bounds_and_probability() {
        let mut rng = substream(7, "spans");
        assert!(sample_spans(&mut rng, 8, 0.0, 4).is_empty());

        let spans = sample_spans(&mut rng, 4, 1.0, 2);
        assert_eq!(spans.len(), 3); // chunks 1..3
        for s in &spans {
            assert!(s.hidden_count >= 1 && s.hidden_count <= s.query_chunk.min(2));
        }

        // Monte Carlo: blocked-chunk frequency tracks p_block
        let p = 0.35;
        let mut hits = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            hits += sample_spans(&mut rng, 2, p, 3).len();
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - p).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn sample_spans_deterministic_given_seed() {
        let a = sample_spans(&mut substream(9, "s"), 8, 0.5, 3);
        let b = sample_spans(&mut substream(9, "s"), 8, 0.5, 3);
        assert_eq!(a, b);
    }

    fn two_segment_map() -> SegmentMap {
        SegmentMap::new(
            vec![
                Segment { frame_start: 0, frame_end: 8, token_start: 4, token_end: 10 },
                Segment { frame_start: 8, frame_end: 16, token_start: 10, token_end: 16 },
            ],
            (0, 4),
        )
        .unwrap()
    }

    #[test]
    fn temporal_cross_mask_matches_predicate() {
        let seg = two_segment_map();
        let m = temporal_cross_mask(16, &seg, 16).unwrap();
        // frame 9 lives in segment 1: attends {0..3} ∪ {10..15}
        let visible: Vec<usize> = (0..16).filter(|&j| m.get(9, j)).collect();
        assert_eq!(visible, (0..4).chain(10..16).collect::<Vec<_>>());
        // every frame sees global plus exactly one local range
        for f in 0..16 {
            let s = &seg.segments()[seg.segment_of(f).unwrap()];
            for j in 0..16 {
                let expect = j < 4 || (s.token_start <= j && j < s.token_end);
                assert_eq!(m.get(f, j), expect, "frame {f} token {j}");
            }
        }
    }

    #[test]
    fn temporal_cross_mask_rejects_uncovered_frames() {
        let seg = two_segment_map();
        assert!(matches!(
            temporal_cross_mask(20, &seg, 16),
            Err(MaskError::FrameOutsideSegments { frame: 16 })
        ));
    }

    #[test]
    fn kf_cross_mask_selects_target_segment() {
        let seg = two_segment_map();
        // stream may sit in segment 0; a KF targeting frame 12 reads segment 1
        let m = kf_cross_mask(&seg, 12, 16).unwrap();
        assert_eq!(m.rows(), 1);
        for j in 0..16 {
            assert_eq!(m.get(0, j), j < 4 || (10..16).contains(&j));
        }
        // same row as the temporal mask's row for that frame
        let t = temporal_cross_mask(16, &seg, 16).unwrap();
        for j in 0..16 {
            assert_eq!(m.get(0, j), t.get(12, j));
        }
        // beyond the schedule → error
        assert!(kf_cross_mask(&seg, 99, 16).is_err());
    }

    #[test]
    fn kf_cross_mask_global_only_schedule() {
        let seg = SegmentMap::new(
            vec![Segment { frame_start: 0, frame_end: 10, token_start: 2, token_end: 2 }],
            (0, 2),
        )
        .unwrap();
        let m = kf_cross_mask(&seg, 5, 2).unwrap();
        assert_eq!(m.ascii(), "##");
    }

    #[test]
    fn segment_map_rejects_gaps_and_overlaps() {
        let gap = SegmentMap::new(
            vec![
                Segment { frame_start: 0, frame_end: 4, token_start: 0, token_end: 1 },
                Segment { frame_start: 5, frame_end: 8, token_start: 1, token_end: 2 },
            ],
            (2, 2),
        );
        assert!(gap.is_err());
        let overlap = SegmentMap::new(
            vec![
                Segment { frame_start: 0, frame_end: 4, token_start: 0, token_end: 3 },
                Segment { frame_start: 4, frame_end: 8, token_start: 2, token_end: 5 },
            ],
            (5, 6),
        );
        assert!(overlap.is_err());
    }

    #[test]
    fn expand_replicates_frame_bits_per_token() {
        let m = causal_chunk_mask(4, 2).unwrap().expand(2, 2);
        assert_eq!(m.rows(), 8);
        assert_eq!(m.cols(), 8);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(m.get(i, j), (j / 2) / 2 <= (i / 2) / 2);
            }
        }
    }

    #[test]
    fn ascii_round_trip_shape() {
        let m = causal_chunk_mask(3, 1).unwrap();
        let grid = m.ascii();
        let lines: Vec<&str> = grid.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == 3));
    }

    #[test]
    fn empty_row_rejected() {
        assert!(matches!(
            AttentionMask::new(2, 2, vec![true, true, false, false]),
            Err(MaskError::EmptyRow { row: 1 })
        ));
    }
}
