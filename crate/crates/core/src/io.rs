//! On-disk formats: session JSONL, one JSON file per screen under
//! `screens/<app_id>/<screen_id>.json`, and the corpus vocabulary as
//! `vocab.txt`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::screen::{Corpus, Screen, Session, SplitTag, Turn};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    Schema(u32),
    #[error("invalid record: {0}")]
    Record(String),
    #[error("identifier {0:?} cannot be used as a file name")]
    BadId(String),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.to_owned(), source }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionLine {
    schema_version: u32,
    session_id: String,
    screen_id: String,
    target: usize,
    turns: Vec<Turn>,
    completed: bool,
    split_tag: SplitTag,
}

/// One JSONL record, without the trailing newline.
pub fn session_to_line(s: &Session) -> String {
    let line = SessionLine {
        schema_version: SCHEMA_VERSION,
        session_id: s.session_id.clone(),
        screen_id: s.screen_id.clone(),
        target: s.target,
        turns: s.turns.clone(),
        completed: s.completed,
        split_tag: s.split_tag,
    };
    serde_json::to_string(&line).expect("sessions always serialize")
}

pub fn session_from_line(line: &str) -> Result<Session, IoError> {
    let l: SessionLine = serde_json::from_str(line).map_err(|e| IoError::Record(e.to_string()))?;
    if l.schema_version != SCHEMA_VERSION {
        return Err(IoError::Schema(l.schema_version));
    }
    Ok(Session {
        session_id: l.session_id,
        screen_id: l.screen_id,
        target: l.target,
        turns: l.turns,
        completed: l.completed,
        split_tag: l.split_tag,
    })
}

pub fn write_sessions(path: &Path, sessions: &[Session]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    let f = File::create(path).map_err(fs_err(path))?;
    let mut w = BufWriter::new(f);
    for s in sessions {
        writeln!(w, "{}", session_to_line(s)).map_err(fs_err(path))?;
    }
    w.flush().map_err(fs_err(path))
}

/// Appends one record; the file is created when missing.
pub fn append_session(path: &Path, session: &Session) -> Result<(), IoError> {
    append_line(path, &session_to_line(session))
}

pub fn append_line(path: &Path, line: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(fs_err(path))?;
    // One write call per record keeps concurrent appenders line-atomic.
    f.write_all(format!("{line}\n").as_bytes()).map_err(fs_err(path))
}

pub fn read_sessions(path: &Path) -> Result<Vec<Session>, IoError> {
    let f = File::open(path).map_err(fs_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(fs_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = session_from_line(&line).map_err(|e| IoError::Parse { path: path.to_owned(), line: i + 1, msg: e.to_string() })?;
        out.push(s);
    }
    Ok(out)
}

fn check_id(id: &str) -> Result<&str, IoError> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
        return Err(IoError::BadId(id.to_owned()));
    }
    Ok(id)
}

pub fn screen_path(root: &Path, screen: &Screen) -> Result<PathBuf, IoError> {
    Ok(root
        .join("screens")
        .join(check_id(&screen.app_id)?)
        .join(format!("{}.json", check_id(&screen.screen_id)?)))
}

pub fn write_screen(root: &Path, screen: &Screen) -> Result<PathBuf, IoError> {
    let path = screen_path(root, screen)?;
    let dir = path.parent().expect("screen path has a parent");
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let text = serde_json::to_string_pretty(screen).expect("screens always serialize");
    fs::write(&path, text + "\n").map_err(fs_err(&path))?;
    Ok(path)
}

pub fn read_screen(path: &Path) -> Result<Screen, IoError> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse { path: path.to_owned(), line: e.line(), msg: e.to_string() })
}

/// Every screen under `root/screens`, sorted by screen id.
pub fn read_screens(root: &Path) -> Result<Vec<Screen>, IoError> {
    let base = root.join("screens");
    let mut out = Vec::new();
    for app in fs::read_dir(&base).map_err(fs_err(&base))? {
        let app = app.map_err(fs_err(&base))?.path();
        if !app.is_dir() {
            continue;
        }
        for f in fs::read_dir(&app).map_err(fs_err(&app))? {
            let f = f.map_err(fs_err(&app))?.path();
            if f.extension().is_some_and(|e| e == "json") {
                out.push(read_screen(&f)?);
            }
        }
    }
    out.sort_by(|a, b| a.screen_id.cmp(&b.screen_id));
    Ok(out)
}

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn save_corpus(root: &Path, corpus: &Corpus) -> Result<(), IoError> {
    fs::create_dir_all(root).map_err(fs_err(root))?;
    for s in corpus.screens.values() {
        write_screen(root, s)?;
    }
    write_sessions(&root.join(SESSIONS_FILE), &corpus.sessions)?;
    let vocab = root.join(VOCAB_FILE);
    let mut text = corpus.vocab.join("\n");
    text.push('\n');
    fs::write(&vocab, text).map_err(fs_err(&vocab))
}

pub fn load_corpus(root: &Path) -> Result<Corpus, IoError> {
    let screens = read_screens(root)?;
    let sessions = read_sessions(&root.join(SESSIONS_FILE))?;
    let vocab_path = root.join(VOCAB_FILE);
    let vocab = fs::read_to_string(&vocab_path)
        .map_err(fs_err(&vocab_path))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect();
    Ok(Corpus { screens: screens.into_iter().map(|s| (s.screen_id.clone(), s)).collect(), sessions, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate_corpus, split_corpus, CorpusConfig};

    fn small() -> Corpus {
        let c = generate_corpus(&CorpusConfig { num_screens: 40, ..Default::default() }).unwrap();
        split_corpus(c, [0.8, 0.1, 0.1]).unwrap()
    }

    #[test]
    fn session_lines_round_trip_bytes() {
        for s in small().sessions {
            let line = session_to_line(&s);
            assert!(line.starts_with("{\"schema_version\":1,"));
            let back = session_from_line(&line).unwrap();
            assert_eq!(back, s);
            assert_eq!(session_to_line(&back), line);
        }
    }

    #[test]
    fn rejects_other_schema_and_unknown_fields() {
        let s = &small().sessions[0];
        let line = session_to_line(s);
        let v2 = line.replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        assert!(matches!(session_from_line(&v2), Err(IoError::Schema(2))));
        let extra = line.replacen('{', "{\"extra\":0,", 1);
        assert!(matches!(session_from_line(&extra), Err(IoError::Record(_))));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        save_corpus(dir.path(), &c).unwrap();
        let s = c.screens.values().next().unwrap();
        assert!(dir.path().join("screens").join(&s.app_id).join(format!("{}.json", s.screen_id)).is_file());
        assert_eq!(load_corpus(dir.path()).unwrap(), c);
    }

    #[test]
    fn append_creates_and_extends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/t.jsonl");
        let c = small();
        append_session(&p, &c.sessions[0]).unwrap();
        append_session(&p, &c.sessions[1]).unwrap();
        assert_eq!(read_sessions(&p).unwrap(), c.sessions[..2]);
    }

    #[test]
    fn bad_ids_rejected() {
        let mut s = small().screens.into_values().next().unwrap();
        s.app_id = "../evil".into();
        assert!(matches!(screen_path(Path::new("/tmp"), &s), Err(IoError::BadId(_))));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let c = small();
        fs::write(&p, format!("{}\nnot json\n", session_to_line(&c.sessions[0]))).unwrap();
        match read_sessions(&p) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
