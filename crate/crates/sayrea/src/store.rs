//! Data directory: the append-only journal plus a rule-list snapshot.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use sayrea_core::engine::{parse_journal, Engine, JournalEntry, JournalEvent};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const RULES_FILE: &str = "rules.jsonl";

pub struct DataDir {
    dir: PathBuf,
    journal: File,
    written: usize,
}

impl DataDir {
    /// Opens (or creates) the directory and returns the journal entries found.
    /// A torn final line is cut off the file.
    pub fn open(dir: &Path) -> anyhow::Result<(DataDir, Vec<JournalEntry>)> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(JOURNAL_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        let entries = parse_journal(&text).with_context(|| format!("parsing {}", path.display()))?;
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            OpenOptions::new().write(true).open(&path)?.set_len(keep as u64)?;
            tracing::warn!(dropped = text.len() - keep, "dropped torn journal tail");
        }
        let journal = OpenOptions::new().create(true).append(true).open(&path)?;
        let written = entries.len();
        Ok((DataDir { dir: dir.to_path_buf(), journal, written }, entries))
    }

    /// Appends entries the engine recorded since the last call and refreshes
    /// the rule snapshot when rules changed.
    pub fn persist(&mut self, engine: &Engine) -> anyhow::Result<()> {
        let fresh = &engine.journal()[self.written..];
        if fresh.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for e in fresh {
            buf.push_str(&e.to_line());
            buf.push('\n');
        }
        self.journal.write_all(buf.as_bytes())?;
        self.journal.sync_data()?;
        let rules_changed =
            fresh.iter().any(|e| matches!(e.event, JournalEvent::RuleInserted { .. } | JournalEvent::RuleDeleted { .. }));
        self.written = engine.journal().len();
        if rules_changed {
            self.write_rules(engine)?;
        }
        Ok(())
    }

    pub fn write_rules(&self, engine: &Engine) -> anyhow::Result<()> {
        let tmp = self.dir.join(format!("{RULES_FILE}.tmp"));
        fs::write(&tmp, engine.rules().export_jsonl())?;
        fs::rename(&tmp, self.dir.join(RULES_FILE))?;
        Ok(())
    }
}
