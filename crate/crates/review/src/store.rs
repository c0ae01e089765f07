//! SQLite persistence. Every mutating operation runs in one transaction;
//! the audit table is append-only.

use std::path::Path;
use std::sync::Mutex;

use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};

use crate::config::Dimension;
use crate::domain::{Acknowledgment, CasePayload, NextCase, Origin, Progress, ReviewCase, ScoringSchema, SessionCreated, Submission};
use crate::export::ExportRow;
use crate::session::{compose, opaque_id};
use crate::ReviewError;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS cases (
    case_id TEXT PRIMARY KEY,
    report_id TEXT NOT NULL,
    findings TEXT NOT NULL,
    indications TEXT NOT NULL,
    candidate TEXT NOT NULL,
    origin TEXT NOT NULL,
    style_owner TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS sessions (
    session_id TEXT PRIMARY KEY,
    reader_id TEXT NOT NULL,
    seed INTEGER NOT NULL,
    n_own INTEGER NOT NULL,
    n_other INTEGER NOT NULL,
    cursor INTEGER NOT NULL DEFAULT 0,
    total INTEGER NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS session_cases (
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    position INTEGER NOT NULL,
    case_id TEXT NOT NULL REFERENCES cases(case_id),
    opaque_id TEXT NOT NULL,
    own_case INTEGER NOT NULL,
    PRIMARY KEY (session_id, position),
    UNIQUE (session_id, opaque_id)
);
CREATE TABLE IF NOT EXISTS assessments (
    reader_id TEXT NOT NULL,
    case_id TEXT NOT NULL REFERENCES cases(case_id),
    session_id TEXT NOT NULL,
    scores TEXT NOT NULL,
    utility INTEGER NOT NULL,
    comment TEXT NOT NULL,
    submitted_at TEXT NOT NULL,
    PRIMARY KEY (reader_id, case_id)
);
CREATE TABLE IF NOT EXISTS audit (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    session_id TEXT NOT NULL,
    reader_id TEXT NOT NULL,
    case_id TEXT NOT NULL,
    payload TEXT NOT NULL,
    replaced INTEGER NOT NULL,
    submitted_at TEXT NOT NULL
);
CREATE TRIGGER IF NOT EXISTS audit_no_update BEFORE UPDATE ON audit
    BEGIN SELECT RAISE(ABORT, 'audit is append-only'); END;
CREATE TRIGGER IF NOT EXISTS audit_no_delete BEFORE DELETE ON audit
    BEGIN SELECT RAISE(ABORT, 'audit is append-only'); END;
";

pub struct Store {
    conn: Mutex<Connection>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SessionRow {
    reader_id: String,
    cursor: usize,
    total: usize,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn case_from_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<(String, String, String, String, String, String, String)> {
    Ok((
        row.get(0)?,
        row.get(1)?,
        row.get(2)?,
        row.get(3)?,
        row.get(4)?,
        row.get(5)?,
        row.get(6)?,
    ))
}

impl Store {
    pub fn open(path: &Path) -> Result<Self, ReviewError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| ReviewError::Io(format!("{}: {e}", dir.display())))?;
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self, ReviewError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, ReviewError> {
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store { conn: Mutex::new(conn) })
    }

    fn with_tx<T>(&self, f: impl FnOnce(&rusqlite::Transaction<'_>) -> Result<T, ReviewError>) -> Result<T, ReviewError> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    /// Adds cases to the pool. Re-adding an identical case is a no-op;
    /// changing an existing case is refused.
    pub fn add_cases(&self, cases: &[ReviewCase]) -> Result<usize, ReviewError> {
        self.with_tx(|tx| {
            let mut added = 0;
            for c in cases {
                if let Some(existing) = load_case(tx, &c.case_id)? {
                    if existing != *c {
                        return Err(ReviewError::Validation(format!(
                            "case {:?} already exists with different content",
                            c.case_id
                        )));
                    }
                    continue;
                }
                tx.execute(
                    "INSERT INTO cases (case_id, report_id, findings, indications, candidate, origin, style_owner)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
                    params![
                        c.case_id,
                        c.report_id,
                        c.findings,
                        c.indications,
                        c.candidate,
                        c.origin.as_str(),
                        c.style_owner
                    ],
                )?;
                added += 1;
            }
            Ok(added)
        })
    }

    pub fn cases(&self) -> Result<Vec<ReviewCase>, ReviewError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut stmt =
            conn.prepare("SELECT case_id, report_id, findings, indications, candidate, origin, style_owner FROM cases ORDER BY case_id")?;
        let rows = stmt.query_map([], case_from_row)?.collect::<Result<Vec<_>, _>>()?;
        rows.into_iter().map(to_case).collect()
    }

    pub fn create_session(&self, reader_id: &str, n_own: usize, n_other: usize, seed: u64) -> Result<SessionCreated, ReviewError> {
        if reader_id.trim().is_empty() {
            return Err(ReviewError::Validation("reader_id is required".into()));
        }
        let pool = self.cases()?;
        let plan = compose(&pool, reader_id, n_own, n_other, seed)?;
        let session_id = uuid::Uuid::new_v4().to_string();
        self.with_tx(|tx| {
            tx.execute(
                "INSERT INTO sessions (session_id, reader_id, seed, n_own, n_other, cursor, total, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, 0, ?6, ?7)",
                params![
                    session_id,
                    reader_id,
                    seed as i64,
                    n_own as i64,
                    n_other as i64,
                    plan.len() as i64,
                    now()
                ],
            )?;
            for (i, p) in plan.iter().enumerate() {
                tx.execute(
                    "INSERT INTO session_cases (session_id, position, case_id, opaque_id, own_case) VALUES (?1, ?2, ?3, ?4, ?5)",
                    params![session_id, i as i64, p.case_id, opaque_id(&session_id, &p.case_id), p.own_case],
                )?;
            }
            Ok(())
        })?;
        tracing::info!(%session_id, total = plan.len(), "session created");
        Ok(SessionCreated {
            session_id,
            total: plan.len(),
        })
    }

    pub fn progress(&self, session_id: &str) -> Result<Progress, ReviewError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let s = load_session(&conn, session_id)?;
        Ok(Progress {
            session_id: session_id.to_string(),
            cursor: s.cursor,
            total: s.total,
            complete: s.cursor >= s.total,
        })
    }

    /// The current case, or the end signal once every case is scored.
    pub fn next_case(&self, session_id: &str, schema: &ScoringSchema) -> Result<NextCase, ReviewError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let s = load_session(&conn, session_id)?;
        if s.cursor >= s.total {
            return Ok(NextCase::Complete { total: s.total });
        }
        let (opaque, case_id): (String, String) = conn.query_row(
            "SELECT opaque_id, case_id FROM session_cases WHERE session_id = ?1 AND position = ?2",
            params![session_id, s.cursor as i64],
            |r| Ok((r.get(0)?, r.get(1)?)),
        )?;
        let case = load_case(&conn, &case_id)?.ok_or_else(|| ReviewError::NotFound(format!("case for position {}", s.cursor)))?;
        Ok(NextCase::Case(CasePayload {
            case_id: opaque,
            position: s.cursor + 1,
            total: s.total,
            findings: case.findings,
            indications: case.indications,
            impression: case.candidate,
            schema: schema.clone(),
        }))
    }

    /// Validates and stores an assessment. The current case advances the
    /// cursor; an earlier case replaces its previous assessment. Every
    /// submission is appended to the audit table.
    pub fn submit(&self, session_id: &str, sub: &Submission, dimensions: &[Dimension]) -> Result<Acknowledgment, ReviewError> {
        sub.validate(dimensions)?;
        self.with_tx(|tx| {
            let s = load_session(tx, session_id)?;
            let found: Option<(i64, String)> = tx
                .query_row(
                    "SELECT position, case_id FROM session_cases WHERE session_id = ?1 AND opaque_id = ?2",
                    params![session_id, sub.case_id],
                    |r| Ok((r.get(0)?, r.get(1)?)),
                )
                .optional()?;
            let (position, case_id) =
                found.ok_or_else(|| ReviewError::NotFound(format!("case {:?} is not in this session", sub.case_id)))?;
            let position = position as usize;
            if position > s.cursor {
                return Err(ReviewError::NotServed(sub.case_id.clone()));
            }
            let replaced: bool = tx
                .query_row(
                    "SELECT 1 FROM assessments WHERE reader_id = ?1 AND case_id = ?2",
                    params![s.reader_id, case_id],
                    |_| Ok(()),
                )
                .optional()?
                .is_some();
            let ts = now();
            let scores = serde_json::to_string(&sub.scores)?;
            tx.execute(
                "INSERT INTO assessments (reader_id, case_id, session_id, scores, utility, comment, submitted_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)
                 ON CONFLICT (reader_id, case_id) DO UPDATE SET
                    session_id = excluded.session_id, scores = excluded.scores, utility = excluded.utility,
                    comment = excluded.comment, submitted_at = excluded.submitted_at",
                params![s.reader_id, case_id, session_id, scores, sub.utility, sub.comment, ts],
            )?;
            tx.execute(
                "INSERT INTO audit (session_id, reader_id, case_id, payload, replaced, submitted_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![session_id, s.reader_id, case_id, serde_json::to_string(sub)?, replaced, ts],
            )?;
            let mut cursor = s.cursor;
            if position == s.cursor {
                cursor += 1;
                tx.execute(
                    "UPDATE sessions SET cursor = ?1 WHERE session_id = ?2",
                    params![cursor as i64, session_id],
                )?;
            }
            Ok(Acknowledgment {
                case_id: sub.case_id.clone(),
                scored: cursor,
                total: s.total,
                replaced,
                complete: cursor >= s.total,
            })
        })
    }

    pub fn audit_len(&self) -> Result<usize, ReviewError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM audit", [], |r| r.get(0))?;
        Ok(n as usize)
    }

    /// Assessments joined with the server-side truth, ordered by reader
    /// then case.
    pub fn export_rows(&self) -> Result<Vec<ExportRow>, ReviewError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut stmt = conn.prepare(
            "SELECT a.reader_id, a.session_id, a.case_id, c.report_id, c.origin, c.style_owner,
                    a.scores, a.utility, a.comment, a.submitted_at
             FROM assessments a JOIN cases c ON c.case_id = a.case_id
             ORDER BY a.reader_id, a.case_id",
        )?;
        let raw = stmt
            .query_map([], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, String>(4)?,
                    r.get::<_, String>(5)?,
                    r.get::<_, String>(6)?,
                    r.get::<_, i64>(7)?,
                    r.get::<_, String>(8)?,
                    r.get::<_, String>(9)?,
                ))
            })?
            .collect::<Result<Vec<_>, _>>()?;
        raw.into_iter()
            .map(
                |(reader_id, session_id, case_id, report_id, origin, style_owner, scores, utility, comment, submitted_at)| {
                    let origin = Origin::parse(&origin)?;
                    let own_case = style_owner == reader_id;
                    Ok(ExportRow {
                        group: crate::export::group_label(origin, own_case).to_string(),
                        reader_id,
                        session_id,
                        case_id,
                        report_id,
                        origin,
                        style_owner,
                        own_case,
                        scores: serde_json::from_str(&scores)?,
                        utility: utility as u8,
                        comment,
                        submitted_at,
                    })
                },
            )
            .collect()
    }
}

fn to_case(t: (String, String, String, String, String, String, String)) -> Result<ReviewCase, ReviewError> {
    Ok(ReviewCase {
        case_id: t.0,
        report_id: t.1,
        findings: t.2,
        indications: t.3,
        candidate: t.4,
        origin: Origin::parse(&t.5)?,
        style_owner: t.6,
    })
}

fn load_case(conn: &Connection, case_id: &str) -> Result<Option<ReviewCase>, ReviewError> {
    conn.query_row(
        "SELECT case_id, report_id, findings, indications, candidate, origin, style_owner FROM cases WHERE case_id = ?1",
        params![case_id],
        case_from_row,
    )
    .optional()?
    .map(to_case)
    .transpose()
}

fn load_session(conn: &Connection, session_id: &str) -> Result<SessionRow, ReviewError> {
    conn.query_row(
        "SELECT reader_id, cursor, total FROM sessions WHERE session_id = ?1",
        params![session_id],
        |r| {
            Ok(SessionRow {
                reader_id: r.get(0)?,
                cursor: r.get::<_, i64>(1)? as usize,
                total: r.get::<_, i64>(2)? as usize,
            })
        },
    )
    .optional()?
    .ok_or_else(|| ReviewError::NotFound(format!("session {session_id:?}")))
}
