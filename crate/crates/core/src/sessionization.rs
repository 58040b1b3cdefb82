//! Sliding-window sessions over a patient's search sequence.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data_model::{PatientHistory, PatientId, SearchEvent, Timestamp, SECONDS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Consecutive searches closer than this share a session.
    pub window_secs: i64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig::from_days(90)
    }
}

impl SessionConfig {
    pub fn from_days(days: i64) -> Self {
        SessionConfig {
            window_secs: days * SECONDS_PER_DAY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_secs <= 0 {
            return Err(Error::InvalidParameter(format!(
                "session window must be positive, got {}s",
                self.window_secs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub patient: PatientId,
    pub session_id: usize,
    /// 0-based, inclusive.
    pub first_index: usize,
    /// 0-based, inclusive.
    pub last_index: usize,
    pub start_time: Timestamp,
    pub end_time: Timestamp,
}

impl Session {
    pub fn len(&self) -> usize {
        self.last_index - self.first_index + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Greedy left-to-right chaining: a search joins the open session iff it
/// follows the previous search by strictly less than the window.
pub fn segment(history: &PatientHistory, config: &SessionConfig) -> Vec<Session> {
    let searches = history.searches();
    let mut sessions: Vec<Session> = Vec::new();
    for (i, s) in searches.iter().enumerate() {
        let joins = i > 0 && s.time.secs() - searches[i - 1].time.secs() < config.window_secs;
        match sessions.last_mut() {
            Some(open) if joins => {
                open.last_index = i;
                open.end_time = s.time;
            }
            _ => sessions.push(Session {
                patient: history.patient().clone(),
                session_id: sessions.len(),
                first_index: i,
                last_index: i,
                start_time: s.time,
                end_time: s.time,
            }),
        }
    }
    sessions
}

/// Returns the history with every search's `session_id` filled in.
pub fn assign_sessions(mut history: PatientHistory, config: &SessionConfig) -> PatientHistory {
    let mut ids = vec![0; history.n_searches()];
    for session in segment(&history, config) {
        ids[session.first_index..=session.last_index].fill(session.session_id);
    }
    history.set_session_ids(&ids);
    history
}

/// Strictly earlier members of the session holding `search_index` (0-based).
pub fn session_prefix(history: &PatientHistory, search_index: usize) -> Result<&[SearchEvent]> {
    let searches = history.searches();
    let target = searches.get(search_index).ok_or_else(|| {
        Error::OutOfRange(format!(
            "search index {search_index} outside 0..{}",
            searches.len()
        ))
    })?;
    let session = target
        .session_id
        .ok_or_else(|| Error::Unsessionized(history.patient().0.clone()))?;
    let start = searches[..search_index]
        .iter()
        .rposition(|s| s.session_id != Some(session))
        .map_or(0, |i| i + 1);
    Ok(&searches[start..search_index])
}

/// Writes `patient_id,session_id,first_index,last_index,length` rows.
/// Indices are 1-based.
pub fn write_session_dump<W: Write>(out: W, sessions: &[Session]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "session_id", "first_index", "last_index", "length"])?;
    for s in sessions {
        w.write_record([
            s.patient.0.clone(),
            (s.session_id + 1).to_string(),
            (s.first_index + 1).to_string(),
            (s.last_index + 1).to_string(),
            s.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<session dump>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Encounter, TermId};
    use proptest::prelude::*;

    fn history_at_days(days: &[i64]) -> PatientHistory {
        let p = PatientId::from("p");
        let searches = days
            .iter()
            .enumerate()
            .map(|(i, d)| SearchEvent::new(p.clone(), Timestamp::from_secs(d * SECONDS_PER_DAY), TermId(i as u32)))
            .collect();
        let encounters = vec![Encounter::new(p.clone(), Timestamp::from_secs(-1), [])];
        PatientHistory::build(p, encounters, searches).unwrap()
    }

    fn members(sessions: &[Session]) -> Vec<Vec<usize>> {
        sessions
            .iter()
            .map(|s| (s.first_index..=s.last_index).collect())
            .collect()
    }

    #[test]
    fn long_gap_splits() {
        let s = segment(&history_at_days(&[0, 30, 200]), &SessionConfig::default());
        assert_eq!(members(&s), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn chaining_exceeds_window_end_to_end() {
        let h = history_at_days(&[0, 89, 178]);
        // pairwise gaps: 89, 89, both < 90
        let gaps: Vec<i64> = h.searches().windows(2).map(|w| w[1].time.secs() - w[0].time.secs()).collect();
        assert!(gaps.iter().all(|&g| g < 90 * SECONDS_PER_DAY));
        let s = segment(&h, &SessionConfig::default());
        assert_eq!(members(&s), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn gap_equal_to_window_splits() {
        let s = segment(&history_at_days(&[0, 90]), &SessionConfig::default());
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(segment(&history_at_days(&[5]), &SessionConfig::default()).len(), 1);
        assert!(segment(&history_at_days(&[]), &SessionConfig::default()).is_empty());
    }

    #[test]
    fn prefixes() {
        let h = assign_sessions(history_at_days(&[0, 1, 2, 300, 301]), &SessionConfig::default());
        assert!(session_prefix(&h, 0).unwrap().is_empty());
        let p: Vec<usize> = session_prefix(&h, 2).unwrap().iter().map(|s| s.seq_index).collect();
        assert_eq!(p, vec![0, 1]);
        // opener of the second session: earlier session excluded
        assert!(session_prefix(&h, 3).unwrap().is_empty());
        let oracle: Vec<usize> = h
            .searches()
            .iter()
            .filter(|s| s.session_id == h.searches()[4].session_id && s.seq_index < 4)
            .map(|s| s.seq_index)
            .collect();
        let p: Vec<usize> = session_prefix(&h, 4).unwrap().iter().map(|s| s.seq_index).collect();
        assert_eq!(p, oracle);
        assert!(session_prefix(&h, 5).is_err());
    }

    #[test]
    fn unsessionized_prefix_rejected() {
        let h = history_at_days(&[0, 1]);
        assert!(matches!(session_prefix(&h, 1), Err(Error::Unsessionized(_))));
    }

    #[test]
    fn dump_format() {
        let s = segment(&history_at_days(&[0, 30, 200]), &SessionConfig::default());
        let mut buf = Vec::new();
        write_session_dump(&mut buf, &s).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "patient_id,session_id,first_index,last_index,length\np,1,1,2,2\np,2,3,3,1\n"
        );
    }

    proptest! {
        #[test]
        fn sessions_partition_and_respect_window(mut days in prop::collection::vec(0i64..1000, 0..30), window in 1i64..200) {
            days.sort_unstable();
            let cfg = SessionConfig::from_days(window);
            let h = history_at_days(&days);
            let sessions = segment(&h, &cfg);
            let flat: Vec<usize> = members(&sessions).concat();
            prop_assert_eq!(flat, (0..days.len()).collect::<Vec<_>>());
            for s in &sessions {
                for i in s.first_index..s.last_index {
                    prop_assert!(h.searches()[i + 1].time.secs() - h.searches()[i].time.secs() < cfg.window_secs);
                }
            }
            for pair in sessions.windows(2) {
                prop_assert!(pair[1].start_time.secs() - pair[0].end_time.secs() >= cfg.window_secs);
            }
            let h = assign_sessions(h, &cfg);
            for s in &sessions {
                for x in s.first_index..=s.last_index {
                    let prefix = session_prefix(&h, x).unwrap();
                    prop_assert_eq!(prefix.len(), x - s.first_index);
                    prop_assert!(prefix.iter().all(|e| e.session_id == Some(s.session_id)));
                }
            }
        }
    }
}
