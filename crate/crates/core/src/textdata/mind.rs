//! MIND-format TSV ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use super::{EngagementRecord, Impression, RawItem, Split};
use crate::error::{Error, Result};

const NEWS_COLUMNS: usize = 8;
const BEHAVIOR_COLUMNS: usize = 5;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty lines with their 1-based numbers; a trailing `\r` is dropped.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Parses news.tsv text; only title, abstract and category are kept.
pub fn parse_news_str(text: &str, path: &Path) -> Result<Vec<RawItem>> {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (no, line) in lines(text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != NEWS_COLUMNS {
            return Err(parse_err(path, no, format!("expected {NEWS_COLUMNS} columns, found {}", cols.len())));
        }
        let id = cols[0].trim();
        if id.is_empty() {
            return Err(parse_err(path, no, "empty news id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(parse_err(path, no, format!("duplicate news id {id}")));
        }
        let fields = BTreeMap::from([
            ("category".to_string(), cols[1].to_string()),
            ("title".to_string(), cols[3].to_string()),
            ("abstract".to_string(), cols[4].to_string()),
        ]);
        items.push(RawItem { id: id.to_string(), fields });
    }
    Ok(items)
}

pub fn parse_mind_news(path: &Path) -> Result<Vec<RawItem>> {
    parse_news_str(&read(path)?, path)
}

#[derive(Debug, Clone, Default)]
pub struct BehaviorLog {
    /// One record per user, from the user's first line.
    pub records: Vec<EngagementRecord>,
    pub impressions: Vec<Impression>,
    /// `(line, news id)` references to ids absent from the news corpus.
    pub dropped: Vec<(usize, String)>,
}

fn parse_candidate<'a>(tok: &'a str, path: &Path, no: usize) -> Result<(&'a str, u8)> {
    let (id, label) = tok
        .rsplit_once('-')
        .ok_or_else(|| parse_err(path, no, format!("candidate {tok:?} lacks a -0/-1 label")))?;
    let label = match label {
        "0" => 0,
        "1" => 1,
        _ => return Err(parse_err(path, no, format!("candidate {tok:?} has label {label:?}"))),
    };
    Ok((id, label))
}

/// Parses behaviors.tsv text. References to ids outside `known` are dropped
/// and recorded in [`BehaviorLog::dropped`].
pub fn parse_behaviors_str(text: &str, path: &Path, known: &HashSet<String>, split: Split) -> Result<BehaviorLog> {
    let mut log = BehaviorLog::default();
    let mut users: HashMap<String, usize> = HashMap::new();
    for (no, line) in lines(text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != BEHAVIOR_COLUMNS {
            return Err(parse_err(path, no, format!("expected {BEHAVIOR_COLUMNS} columns, found {}", cols.len())));
        }
        let user_id = cols[1].trim();
        if user_id.is_empty() {
            return Err(parse_err(path, no, "empty user id"));
        }
        let mut history = Vec::new();
        for id in cols[3].split_whitespace() {
            if known.contains(id) {
                history.push(id.to_string());
            } else {
                log.dropped.push((no, id.to_string()));
            }
        }
        let mut candidates = Vec::new();
        for tok in cols[4].split_whitespace() {
            let (id, label) = parse_candidate(tok, path, no)?;
            if known.contains(id) {
                candidates.push((id.to_string(), label));
            } else {
                log.dropped.push((no, id.to_string()));
            }
        }
        if !users.contains_key(user_id) {
            users.insert(user_id.to_string(), log.records.len());
            log.records.push(EngagementRecord {
                user_id: user_id.to_string(),
                history,
                summary: None,
            });
        }
        log.impressions.push(Impression {
            id: cols[0].trim().to_string(),
            user_id: user_id.to_string(),
            candidates,
            split,
        });
    }
    if !log.dropped.is_empty() {
        log::warn!("{}: dropped {} references to unknown news ids", path.display(), log.dropped.len());
    }
    Ok(log)
}

pub fn parse_mind_behaviors(path: &Path, known: &HashSet<String>, split: Split) -> Result<BehaviorLog> {
    parse_behaviors_str(&read(path)?, path, known, split)
}

/// `user_id<TAB>summary` lines.
pub fn parse_summaries_str(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in lines(text) {
        let (user, summary) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, no, "expected user_id<TAB>summary"))?;
        out.insert(user.trim().to_string(), summary.trim().to_string());
    }
    Ok(out)
}

pub fn parse_summaries(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_summaries_str(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.tsv")
    }

    fn known(ids: &[&str]) -> HashSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn news_line() {
        let items = parse_news_str("N1\tsports\tsoccer\tTitle\tAbstract\turl\t[]\t[]\n", p()).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].id, "N1");
        assert_eq!(items[0].fields.len(), 3);
        assert_eq!(items[0].fields["title"], "Title");
        assert_eq!(items[0].fields["abstract"], "Abstract");
        assert_eq!(items[0].fields["category"], "sports");
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let text = "N1\ta\tb\tc\td\te\tf\tg\n\nN2\tonly\n";
        match parse_news_str(text, p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn behaviors_line() {
        let k = known(&["N10", "N20", "N30", "N40"]);
        let log = parse_behaviors_str("1\tU1\t11/11/2019 9:05:58 AM\tN10 N20\tN30-1 N40-0\n", p(), &k, Split::Train).unwrap();
        assert_eq!(log.records[0].history, vec!["N10", "N20"]);
        assert_eq!(
            log.impressions[0].candidates,
            vec![("N30".to_string(), 1), ("N40".to_string(), 0)]
        );
        assert!(log.dropped.is_empty());
    }

    #[test]
    fn empty_history_and_unknown_ids() {
        let k = known(&["N30", "N40"]);
        let log = parse_behaviors_str("1\tU1\tt\t\tN30-1 N99-0 N40-0\n", p(), &k, Split::Dev).unwrap();
        assert!(log.records[0].history.is_empty());
        assert_eq!(log.impressions[0].candidates.len(), 2);
        assert_eq!(log.dropped, vec![(1, "N99".to_string())]);
        assert_eq!(log.impressions[0].split, Split::Dev);
    }

    #[test]
    fn bad_labels_rejected() {
        let k = known(&["N30"]);
        assert!(parse_behaviors_str("1\tU1\tt\t\tN30-2\n", p(), &k, Split::Train).is_err());
        assert!(parse_behaviors_str("1\tU1\tt\t\tN30\n", p(), &k, Split::Train).is_err());
        assert!(parse_behaviors_str("1\tU1\tt\tN30-1\n", p(), &k, Split::Train).is_err());
    }

    #[test]
    fn accepted_lines_reference_known_or_dropped_ids() {
        let k = known(&["N1", "N2"]);
        let text = "1\tU1\tt\tN1 N5\tN2-1 N6-0\n2\tU2\tt\tN7\tN1-0 N2-1\n";
        let log = parse_behaviors_str(text, p(), &k, Split::Train).unwrap();
        let dropped: HashSet<&str> = log.dropped.iter().map(|d| d.1.as_str()).collect();
        for r in &log.records {
            assert!(r.history.iter().all(|id| k.contains(id)));
        }
        for imp in &log.impressions {
            assert!(imp.candidates.iter().all(|(id, _)| k.contains(id)));
        }
        assert_eq!(dropped, HashSet::from(["N5", "N6", "N7"]));
    }

    #[test]
    fn summaries() {
        let s = parse_summaries_str("U1\tthe user likes a .\nU2\tb\n", p()).unwrap();
        assert_eq!(s["U1"], "the user likes a .");
        assert!(parse_summaries_str("nosummary\n", p()).is_err());
    }
}
