use std::fs::File;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{backend_err, check_enhanced, Enhancer, RecognitionRequest, Recognizer, Scorer};
use crate::audio::{load_wav, save_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::ManifestRecord;
use crate::supervision::MosScore;

/// Runs a shell command template once per call.
///
/// Placeholders `{input_wav}`, `{output_wav}`, `{utt_id}` and `{omega}` are
/// replaced by shell-quoted values. Audio is exchanged through a scratch
/// directory that is removed afterwards.
#[derive(Debug, Clone)]
struct CommandRunner {
    id: String,
    template: String,
    timeout: Duration,
}

struct Invocation<'a> {
    utt_id: &'a str,
    omega: Option<f64>,
    audio: &'a Waveform,
    wants_output: bool,
}

struct Finished {
    stdout: String,
    output: Option<Waveform>,
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

impl CommandRunner {
    fn render(&self, inv: &Invocation<'_>, input: &Path, output: &Path) -> String {
        let omega = inv.omega.map(|w| format!("{w}")).unwrap_or_default();
        self.template
            .replace("{input_wav}", &shell_quote(&input.to_string_lossy()))
            .replace("{output_wav}", &shell_quote(&output.to_string_lossy()))
            .replace("{utt_id}", &shell_quote(inv.utt_id))
            .replace("{omega}", &shell_quote(&omega))
    }

    fn run(&self, inv: Invocation<'_>) -> Result<Finished> {
        let fail = |m: String| backend_err(&self.id, inv.utt_id, m);
        let scratch = tempfile::tempdir().map_err(|e| fail(format!("scratch dir: {e}")))?;
        let input = scratch.path().join("input.wav");
        let output = scratch.path().join("output.wav");
        let out_log = scratch.path().join("stdout");
        let err_log = scratch.path().join("stderr");
        save_wav(inv.audio, &input)?;

        let script = self.render(&inv, &input, &output);
        let stdout = File::create(&out_log).map_err(|e| Error::io(&out_log, e))?;
        let stderr = File::create(&err_log).map_err(|e| Error::io(&err_log, e))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&script)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|e| fail(format!("spawn failed: {e}")))?;

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() > self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(fail(format!("timed out after {:.1} s", self.timeout.as_secs_f64())));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(fail(format!("wait failed: {e}"))),
            }
        };
        let stdout = std::fs::read_to_string(&out_log).unwrap_or_default();
        if !status.success() {
            let stderr = std::fs::read_to_string(&err_log).unwrap_or_default();
            return Err(fail(format!("command exited with {status}: {}", stderr.trim())));
        }
        let output = if inv.wants_output {
            if !output.exists() {
                return Err(fail("command did not write {output_wav}".into()));
            }
            Some(load_wav(&output, None).map_err(|e| fail(e.to_string()))?)
        } else {
            None
        };
        Ok(Finished { stdout, output })
    }
}

/// Enhancer that runs a command writing `{output_wav}` from `{input_wav}`.
#[derive(Debug, Clone)]
pub struct CommandEnhancer(CommandRunner);

impl CommandEnhancer {
    pub fn new(id: &str, template: &str, timeout: Duration) -> Self {
        Self(CommandRunner {
            id: id.into(),
            template: template.into(),
            timeout,
        })
    }
}

impl Enhancer for CommandEnhancer {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn enhance(&self, rec: &ManifestRecord, x: &Waveform) -> Result<Waveform> {
        let done = self.0.run(Invocation {
            utt_id: &rec.utt_id,
            omega: None,
            audio: x,
            wants_output: true,
        })?;
        let y = done.output.expect("requested output");
        check_enhanced(&self.0.id, &rec.utt_id, x, &y)?;
        Ok(y)
    }
}

/// Recognizer that reads the transcript from the command's stdout.
#[derive(Debug, Clone)]
pub struct CommandRecognizer(CommandRunner);

impl CommandRecognizer {
    pub fn new(id: &str, template: &str, timeout: Duration) -> Self {
        Self(CommandRunner {
            id: id.into(),
            template: template.into(),
            timeout,
        })
    }
}

impl Recognizer for CommandRecognizer {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn transcribe(&self, req: &RecognitionRequest<'_>) -> Result<String> {
        let done = self.0.run(Invocation {
            utt_id: req.utt_id,
            omega: req.omega,
            audio: req.audio,
            wants_output: false,
        })?;
        Ok(done.stdout.trim().to_string())
    }
}

/// Scorer whose command prints `sig=<float> bak=<float>`.
#[derive(Debug, Clone)]
pub struct CommandScorer(CommandRunner);

impl CommandScorer {
    pub fn new(id: &str, template: &str, timeout: Duration) -> Self {
        Self(CommandRunner {
            id: id.into(),
            template: template.into(),
            timeout,
        })
    }
}

impl Scorer for CommandScorer {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn score(&self, rec: &ManifestRecord, w: &Waveform) -> Result<MosScore> {
        let done = self.0.run(Invocation {
            utt_id: &rec.utt_id,
            omega: None,
            audio: w,
            wants_output: false,
        })?;
        parse_scorer_output(&done.stdout).map_err(|e| backend_err(&self.0.id, &rec.utt_id, e.to_string()))
    }
}

/// Parses `sig=<float> bak=<float>` (any order, whitespace separated).
pub fn parse_scorer_output(text: &str) -> Result<MosScore> {
    let (mut sig, mut bak) = (None, None);
    for field in text.split_whitespace() {
        let Some((key, value)) = field.split_once('=') else {
            continue;
        };
        let slot = match key {
            "sig" => &mut sig,
            "bak" => &mut bak,
            _ => continue,
        };
        let v: f64 = value
            .parse()
            .map_err(|_| Error::invalid(format!("unparseable {key} value {value:?}")))?;
        *slot = Some(v);
    }
    match (sig, bak) {
        (Some(s), Some(b)) => MosScore::new(s, b),
        _ => Err(Error::invalid(format!("expected `sig=<f> bak=<f>`, got {:?}", text.trim()))),
    }
}
