//! Critical status patterns.
//!
//! Status events are folded into one transaction per 10-minute slot (the set
//! of alarms active at any point in the slot). Frequent itemsets over the
//! critical alarms are mined level-wise, Apriori style, and the maximal ones
//! become failure classes. Every slot is then labeled either `Normal` or with
//! the best-matching pattern.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::ingest::{AlarmKind, StatusEvent};
use crate::time::{TimeRange, Timestamp, SLOT_SECONDS};

pub type AlarmSet = BTreeSet<String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub turbine_id: String,
    pub slot: Timestamp,
    pub active_alarms: AlarmSet,
}

/// A failure class label. `Normal` (id 0) orders before every pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Normal,
    Pattern(u32),
}

impl ClassLabel {
    pub fn id(self) -> u32 {
        match self {
            ClassLabel::Normal => 0,
            ClassLabel::Pattern(id) => id,
        }
    }

    pub fn from_id(id: u32) -> ClassLabel {
        if id == 0 {
            ClassLabel::Normal
        } else {
            ClassLabel::Pattern(id)
        }
    }

    pub fn is_normal(self) -> bool {
        self == ClassLabel::Normal
    }

    pub fn parse(s: &str) -> Option<ClassLabel> {
        if s.eq_ignore_ascii_case("normal") {
            return Some(ClassLabel::Normal);
        }
        s.parse::<u32>().ok().map(ClassLabel::from_id)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Normal => f.write_str("Normal"),
            ClassLabel::Pattern(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusPattern {
    pub pattern_id: u32,
    pub alarm_set: AlarmSet,
    /// Fraction of transactions containing the whole set.
    pub support: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PatternError {
    #[error("no frequent critical-alarm pattern at min_support {min_support}")]
    NoPatternsFound { min_support: f64 },
    #[error("min_support {0} outside (0, 1]")]
    InvalidSupport(f64),
    #[error("critical alarm set is empty")]
    NoCriticalAlarms,
}

/// One transaction per slot of `range`. An alarm belongs to a slot iff its
/// active interval `[activation, deactivation)` intersects `[slot, slot+600)`;
/// alarms still active at the end of the event stream stay active through
/// the end of the range. Events must already satisfy store validation.
pub fn build_transactions(turbine_id: &str, events: &[StatusEvent], range: TimeRange) -> Vec<Transaction> {
    let slots: Vec<Timestamp> = range.slots().collect();
    let mut sets = vec![AlarmSet::new(); slots.len()];
    if slots.is_empty() {
        return Vec::new();
    }
    let first = slots[0].0;
    let mut open: HashMap<&str, Timestamp> = HashMap::new();
    let mut mark = |code: &str, from: Timestamp, to: Timestamp| {
        // Clip to the range and to the covered slots.
        let from = from.max(range.start);
        let to = to.min(range.end);
        if to <= from {
            return;
        }
        let a = ((from.0 - first) / SLOT_SECONDS) as usize;
        let b = ((to.0 - 1 - first) / SLOT_SECONDS) as usize;
        for set in &mut sets[a..=b.min(slots.len() - 1)] {
            set.insert(code.to_string());
        }
    };
    for e in events {
        match e.kind {
            AlarmKind::Activation => {
                open.insert(&e.alarm_code, e.timestamp);
            }
            AlarmKind::Deactivation => {
                if let Some(start) = open.remove(e.alarm_code.as_str()) {
                    mark(&e.alarm_code, start, e.timestamp);
                }
            }
        }
    }
    for (code, start) in open {
        mark(code, start, range.end);
    }
    slots
        .into_iter()
        .zip(sets)
        .map(|(slot, active_alarms)| Transaction {
            turbine_id: turbine_id.to_string(),
            slot,
            active_alarms,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningSettings {
    pub min_support: f64,
    pub max_patterns: usize,
}

impl Default for MiningSettings {
    fn default() -> Self {
        MiningSettings {
            min_support: 0.01,
            max_patterns: 8,
        }
    }
}

/// Level-wise frequent itemset mining restricted to `critical` alarms,
/// keeping maximal itemsets only.
///
/// Support is measured over all transactions. Patterns are ranked by
/// support (descending, ties by the sorted alarm list) and numbered from 1.
pub fn mine_patterns(
    transactions: &[Transaction],
    critical: &AlarmSet,
    settings: MiningSettings,
) -> Result<Vec<StatusPattern>, PatternError> {
    let min_support = settings.min_support;
    if !(min_support > 0.0 && min_support <= 1.0) {
        return Err(PatternError::InvalidSupport(min_support));
    }
    if critical.is_empty() {
        return Err(PatternError::NoCriticalAlarms);
    }
    let none = || PatternError::NoPatternsFound { min_support };
    let n = transactions.len();
    if n == 0 {
        return Err(none());
    }
    let min_count = (min_support * n as f64 - 1e-9).ceil().max(1.0) as usize;

    // Items are indexed; each transaction becomes a sorted item-index list.
    let items: Vec<&String> = critical.iter().collect();
    let index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let baskets: Vec<Vec<usize>> = transactions
        .iter()
        .map(|t| {
            t.active_alarms
                .iter()
                .filter_map(|a| index.get(a.as_str()).copied())
                .collect()
        })
        .filter(|b: &Vec<usize>| !b.is_empty())
        .collect();

    let count_of = |set: &[usize]| -> usize { baskets.iter().filter(|b| is_subset(set, b)).count() };

    let mut frequent: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut level: Vec<Vec<usize>> = (0..items.len())
        .map(|i| vec![i])
        .filter(|s| count_of(s) >= min_count)
        .collect();
    while !level.is_empty() {
        for s in &level {
            frequent.insert(s.clone(), count_of(s));
        }
        let prev: BTreeSet<Vec<usize>> = level.iter().cloned().collect();
        let mut next = Vec::new();
        for (i, a) in level.iter().enumerate() {
            for b in &level[i + 1..] {
                // Join sets sharing every item but the last.
                if a[..a.len() - 1] != b[..b.len() - 1] {
                    continue;
                }
                let mut cand = a.clone();
                cand.push(*b.last().unwrap());
                cand.sort_unstable();
                // Prune: every (k-1)-subset must be frequent.
                let all_frequent = (0..cand.len()).all(|skip| {
                    let sub: Vec<usize> = cand
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != skip)
                        .map(|(_, v)| *v)
                        .collect();
                    prev.contains(&sub)
                });
                if all_frequent && count_of(&cand) >= min_count {
                    next.push(cand);
                }
            }
        }
        next.sort();
        next.dedup();
        level = next;
    }

    let sets: Vec<&Vec<usize>> = frequent.keys().collect();
    let mut maximal: Vec<(AlarmSet, usize)> = sets
        .iter()
        .filter(|s| !sets.iter().any(|t| t.len() > s.len() && is_subset(s, t)))
        .map(|s| (s.iter().map(|&i| items[i].clone()).collect(), frequent[*s]))
        .collect();
    if maximal.is_empty() {
        return Err(none());
    }
    maximal.sort_by(|(a, ca), (b, cb)| cb.cmp(ca).then_with(|| a.cmp(b)));
    maximal.truncate(settings.max_patterns.max(1));
    Ok(maximal
        .into_iter()
        .enumerate()
        .map(|(i, (alarm_set, count))| StatusPattern {
            pattern_id: i as u32 + 1,
            alarm_set,
            support: count as f64 / n as f64,
            count,
        })
        .collect())
}

/// `small` and `big` are sorted ascending.
fn is_subset(small: &[usize], big: &[usize]) -> bool {
    let mut it = big.iter();
    small.iter().all(|x| it.any(|y| y == x))
}

/// Labels an alarm set. Alarms that appear in no pattern are ignored; if
/// nothing is left the slot is `Normal`, otherwise the label is the pattern
/// with the highest Jaccard similarity, lowest id on ties.
pub fn assign_class(active_alarms: &AlarmSet, patterns: &[StatusPattern]) -> ClassLabel {
    let critical: AlarmSet = patterns
        .iter()
        .flat_map(|p| p.alarm_set.iter())
        .filter(|a| active_alarms.contains(*a))
        .cloned()
        .collect();
    if critical.is_empty() {
        return ClassLabel::Normal;
    }
    let mut best: Option<(f64, u32)> = None;
    for p in patterns {
        let inter = p.alarm_set.intersection(&critical).count();
        let union = p.alarm_set.union(&critical).count();
        let j = inter as f64 / union as f64;
        best = match best {
            Some((bj, bid)) if bj > j || (bj == j && bid < p.pattern_id) => Some((bj, bid)),
            _ => Some((j, p.pattern_id)),
        };
    }
    ClassLabel::Pattern(best.unwrap().1)
}

/// Contiguous per-slot labels for one turbine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTimeline {
    pub turbine_id: String,
    pub start: Timestamp,
    pub labels: Vec<ClassLabel>,
}

impl ClassTimeline {
    pub fn end(&self) -> Timestamp {
        self.start.add_slots(self.labels.len() as i64)
    }

    /// Label of the slot starting at `t`, if `t` is an aligned slot in range.
    pub fn label_at(&self, t: Timestamp) -> Option<ClassLabel> {
        if !t.is_slot_aligned() || t < self.start {
            return None;
        }
        let i = ((t.0 - self.start.0) / SLOT_SECONDS) as usize;
        self.labels.get(i).copied()
    }

    pub fn slots(&self) -> impl Iterator<Item = (Timestamp, ClassLabel)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (self.start.add_slots(i as i64), *l))
    }
}

/// Applies [`assign_class`] to every transaction. Transactions must be
/// contiguous slots, as produced by [`build_transactions`].
pub fn build_class_timeline(transactions: &[Transaction], patterns: &[StatusPattern]) -> ClassTimeline {
    ClassTimeline {
        turbine_id: transactions.first().map(|t| t.turbine_id.clone()).unwrap_or_default(),
        start: transactions.first().map(|t| t.slot).unwrap_or_default(),
        labels: transactions
            .iter()
            .map(|t| assign_class(&t.active_alarms, patterns))
            .collect(),
    }
}

/// Human-readable class list, one line per class with its alarm set.
pub fn patterns_report(turbine_id: &str, patterns: &[StatusPattern]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "turbine {turbine_id}: {} classes", patterns.len() + 1);
    for p in patterns {
        let alarms: Vec<&str> = p.alarm_set.iter().map(String::as_str).collect();
        let _ = writeln!(
            s,
            "  Class {}: {}  (support {:.2}%, {} slots)",
            p.pattern_id,
            alarms.join(", "),
            p.support * 100.0,
            p.count
        );
    }
    let _ = writeln!(s, "  Class {}: Normal", patterns.len() + 1);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: i64 = 1_420_070_400; // 2015-01-01T00:00:00Z

    fn ev(secs: i64, code: &str, kind: AlarmKind) -> StatusEvent {
        StatusEvent {
            turbine_id: "T1".into(),
            timestamp: Timestamp(T0 + secs),
            alarm_code: code.into(),
            kind,
        }
    }

    fn set(items: &[&str]) -> AlarmSet {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn range(slots: i64) -> TimeRange {
        TimeRange::new(Timestamp(T0), Timestamp(T0).add_slots(slots))
    }

    fn tx(sets: &[&[&str]]) -> Vec<Transaction> {
        sets.iter()
            .enumerate()
            .map(|(i, s)| Transaction {
                turbine_id: "T1".into(),
                slot: Timestamp(T0).add_slots(i as i64),
                active_alarms: set(s),
            })
            .collect()
    }

    fn settings(min_support: f64) -> MiningSettings {
        MiningSettings {
            min_support,
            max_patterns: 8,
        }
    }

    #[test]
    fn interval_intersects_slots() {
        let events = [ev(300, "A", AlarmKind::Activation), ev(1500, "A", AlarmKind::Deactivation)];
        let t = build_transactions("T1", &events, range(6));
        let hit: Vec<usize> = (0..6).filter(|&i| t[i].active_alarms.contains("A")).collect();
        assert_eq!(hit, vec![0, 1, 2]);
    }

    #[test]
    fn deactivation_on_boundary_is_exclusive() {
        let events = [ev(0, "A", AlarmKind::Activation), ev(1200, "A", AlarmKind::Deactivation)];
        let t = build_transactions("T1", &events, range(4));
        let hit: Vec<usize> = (0..4).filter(|&i| t[i].active_alarms.contains("A")).collect();
        assert_eq!(hit, vec![0, 1]);
    }

    #[test]
    fn no_events_empty_sets() {
        let t = build_transactions("T1", &[], range(5));
        assert_eq!(t.len(), 5);
        assert!(t.iter().all(|x| x.active_alarms.is_empty()));
    }

    #[test]
    fn open_alarm_runs_to_range_end() {
        let events = [ev(2000, "A", AlarmKind::Activation)];
        let t = build_transactions("T1", &events, range(6));
        let hit: Vec<usize> = (0..6).filter(|&i| t[i].active_alarms.contains("A")).collect();
        assert_eq!(hit, vec![3, 4, 5]);
    }

    #[test]
    fn alarm_active_before_range_start() {
        let events = [ev(-5000, "A", AlarmKind::Activation), ev(700, "A", AlarmKind::Deactivation)];
        let t = build_transactions("T1", &events, range(3));
        let hit: Vec<usize> = (0..3).filter(|&i| t[i].active_alarms.contains("A")).collect();
        assert_eq!(hit, vec![0, 1]);
    }

    #[test]
    fn mine_pair_suppresses_subsets() {
        let mut sets: Vec<&[&str]> = vec![&["A", "B"]; 6];
        sets.extend([&["A"][..], &["C"], &[], &[]]);
        let p = mine_patterns(&tx(&sets), &set(&["A", "B", "C"]), settings(0.5)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].alarm_set, set(&["A", "B"]));
        assert!((p[0].support - 0.6).abs() < 1e-12);
        assert_eq!(p[0].pattern_id, 1);
    }

    #[test]
    fn full_support_heterogeneous_finds_nothing() {
        let t = tx(&[&["A"], &["B"], &["A", "B"]]);
        assert_eq!(
            mine_patterns(&t, &set(&["A", "B"]), settings(1.0)),
            Err(PatternError::NoPatternsFound { min_support: 1.0 })
        );
    }

    #[test]
    fn single_transaction_full_support() {
        let p = mine_patterns(&tx(&[&["A"]]), &set(&["A"]), settings(1.0)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].alarm_set, set(&["A"]));
        assert_eq!(p[0].support, 1.0);
    }

    #[test]
    fn non_critical_alarms_ignored() {
        let t = tx(&[&["A", "N"], &["A", "N"]]);
        let p = mine_patterns(&t, &set(&["A"]), settings(0.5)).unwrap();
        assert_eq!(p[0].alarm_set, set(&["A"]));
    }

    #[test]
    fn mining_rejects_bad_settings() {
        let t = tx(&[&["A"]]);
        assert_eq!(
            mine_patterns(&t, &set(&["A"]), settings(0.0)),
            Err(PatternError::InvalidSupport(0.0))
        );
        assert_eq!(
            mine_patterns(&t, &AlarmSet::new(), settings(0.5)),
            Err(PatternError::NoCriticalAlarms)
        );
    }

    #[test]
    fn truncates_to_max_patterns_by_support() {
        let t = tx(&[&["A"], &["A"], &["A"], &["B"], &["B"], &["C"]]);
        let p = mine_patterns(
            &t,
            &set(&["A", "B", "C"]),
            MiningSettings {
                min_support: 0.1,
                max_patterns: 2,
            },
        )
        .unwrap();
        let got: Vec<AlarmSet> = p.iter().map(|x| x.alarm_set.clone()).collect();
        assert_eq!(got, vec![set(&["A"]), set(&["B"])]);
        assert_eq!(p[1].pattern_id, 2);
    }

    fn pattern(id: u32, alarms: &[&str]) -> StatusPattern {
        StatusPattern {
            pattern_id: id,
            alarm_set: set(alarms),
            support: 0.1,
            count: 1,
        }
    }

    #[test]
    fn assign_class_cases() {
        let ps = vec![pattern(1, &["A", "B"]), pattern(2, &["B", "C"])];
        assert_eq!(assign_class(&set(&[]), &ps), ClassLabel::Normal);
        assert_eq!(assign_class(&set(&["Z"]), &ps), ClassLabel::Normal);
        assert_eq!(assign_class(&set(&["B", "C"]), &ps), ClassLabel::Pattern(2));
        // Jaccard({A,B},{A,B,C}) = Jaccard({B,C},{A,B,C}) = 2/3: lower id wins.
        assert_eq!(assign_class(&set(&["A", "B", "C"]), &ps), ClassLabel::Pattern(1));
        let mut rev = ps.clone();
        rev.reverse();
        assert_eq!(assign_class(&set(&["A", "B", "C"]), &rev), ClassLabel::Pattern(1));
        assert_eq!(assign_class(&set(&["C", "Z"]), &ps), ClassLabel::Pattern(2));
    }

    #[test]
    fn timeline_labels() {
        let ps = vec![pattern(1, &["A"])];
        let t = tx(&[&[], &["A"], &[], &["N"]]);
        let tl = build_class_timeline(&t, &ps);
        assert_eq!(
            tl.labels,
            vec![ClassLabel::Normal, ClassLabel::Pattern(1), ClassLabel::Normal, ClassLabel::Normal]
        );
        assert_eq!(tl.label_at(Timestamp(T0).add_slots(1)), Some(ClassLabel::Pattern(1)));
        assert_eq!(tl.label_at(Timestamp(T0).add_slots(4)), None);
        assert_eq!(tl.label_at(Timestamp(T0 + 1)), None);
    }

    #[test]
    fn class_label_ordering_and_text() {
        assert!(ClassLabel::Normal < ClassLabel::Pattern(1));
        assert_eq!(ClassLabel::parse("Normal"), Some(ClassLabel::Normal));
        assert_eq!(ClassLabel::parse("3"), Some(ClassLabel::Pattern(3)));
        assert_eq!(ClassLabel::Pattern(3).to_string(), "3");
        assert_eq!(ClassLabel::from_id(0), ClassLabel::Normal);
    }

    #[test]
    fn report_lists_classes() {
        let r = patterns_report("T5", &[pattern(1, &["InvCH0Loss", "WLFRTActive"])]);
        assert!(r.contains("Class 1: InvCH0Loss, WLFRTActive"));
        assert!(r.contains("Class 2: Normal"));
    }
}
