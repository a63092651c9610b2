//! Greedy and beam decoding, corpus BLEU and regime comparison reports.

mod bleu;
mod decode;
mod report;

#[cfg(test)]
mod tests;

pub use bleu::{bleu_corpus, bleu_corpus_13a, tokenize_13a, BleuStats, MAX_ORDER};
pub use decode::{
    beam_search, decode_one, evaluate_corpus, greedy_decode, translate_ids, DecodeConfig, Hypothesis,
    SourceState,
};
pub use report::{bar_chart_svg, report_emit, summarize, ReportSummary, ScoreTable};
