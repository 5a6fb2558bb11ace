//! File writer thread for the service. The control thread hands it lines to
//! append so disk latency never reaches the tick.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;

use crossbeam_channel::{Receiver, Sender};

pub(crate) enum WriterMsg {
    /// Service-wide event; also copied into the open session, if any.
    Event(String),
    /// Opens a session directory; later session lines go there.
    OpenSession(PathBuf),
    Trial(String),
    Telemetry(String),
    /// Writes `summary.json` and closes the session files.
    CloseSession(String),
}

struct SessionFiles {
    dir: PathBuf,
    events: BufWriter<File>,
    trials: BufWriter<File>,
    telemetry: BufWriter<File>,
}

fn create(dir: &Path, name: &str) -> std::io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

impl SessionFiles {
    fn open(dir: PathBuf) -> std::io::Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(SessionFiles {
            events: create(&dir, "events.jsonl")?,
            trials: create(&dir, "trials.jsonl")?,
            telemetry: create(&dir, "telemetry.jsonl")?,
            dir,
        })
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.events.flush()?;
        self.trials.flush()?;
        self.telemetry.flush()
    }
}

fn line(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(s.as_bytes())?;
    w.write_all(b"\n")
}

fn run(out_dir: &Path, rx: Receiver<WriterMsg>) -> std::io::Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut events = BufWriter::new(OpenOptions::new().create(true).append(true).open(out_dir.join("events.jsonl"))?);
    let mut session: Option<SessionFiles> = None;
    while let Ok(msg) = rx.recv() {
        let mut next = Some(msg);
        // Drain whatever is queued, then flush once.
        while let Some(msg) = next {
            match msg {
                WriterMsg::Event(s) => {
                    line(&mut events, &s)?;
                    if let Some(f) = session.as_mut() {
                        line(&mut f.events, &s)?;
                    }
                }
                WriterMsg::OpenSession(dir) => {
                    if let Some(mut f) = session.take() {
                        f.flush()?;
                    }
                    session = Some(SessionFiles::open(dir)?);
                }
                WriterMsg::Trial(s) => {
                    if let Some(f) = session.as_mut() {
                        line(&mut f.trials, &s)?;
                    }
                }
                WriterMsg::Telemetry(s) => {
                    if let Some(f) = session.as_mut() {
                        line(&mut f.telemetry, &s)?;
                    }
                }
                WriterMsg::CloseSession(summary) => {
                    if let Some(mut f) = session.take() {
                        f.flush()?;
                        fs::write(f.dir.join("summary.json"), summary + "\n")?;
                    }
                }
            }
            next = rx.try_recv().ok();
        }
        events.flush()?;
        if let Some(f) = session.as_mut() {
            f.flush()?;
        }
    }
    Ok(())
}

/// Starts the writer. It exits once every sender is dropped.
pub(crate) fn spawn(out_dir: PathBuf) -> (Sender<WriterMsg>, JoinHandle<std::io::Result<()>>) {
    let (tx, rx) = crossbeam_channel::unbounded();
    let h = std::thread::Builder::new()
        .name("thermogrid-writer".into())
        .spawn(move || run(&out_dir, rx))
        .expect("spawn writer thread");
    (tx, h)
}
