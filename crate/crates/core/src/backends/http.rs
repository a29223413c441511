use std::io::Read;
use std::time::Duration;

use serde::Deserialize;

use super::{backend_err, check_enhanced, Enhancer, RecognitionRequest, Recognizer, Scorer};
use crate::audio::{decode_wav, encode_wav, Waveform};
use crate::error::Result;
use crate::manifest::ManifestRecord;
use crate::supervision::MosScore;

/// POSTs 16-bit WAV bytes with `X-Utt-Id` (and `X-Omega` when known) headers.
#[derive(Debug, Clone)]
struct HttpClient {
    id: String,
    url: String,
    agent: ureq::Agent,
}

impl HttpClient {
    fn new(id: &str, url: &str, timeout: Duration) -> Self {
        Self {
            id: id.into(),
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    fn post(&self, utt_id: &str, omega: Option<f64>, audio: &Waveform) -> Result<ureq::Response> {
        let body = encode_wav(audio)?;
        let mut req = self
            .agent
            .post(&self.url)
            .set("Content-Type", "audio/wav")
            .set("X-Utt-Id", utt_id);
        if let Some(w) = omega {
            req = req.set("X-Omega", &w.to_string());
        }
        req.send_bytes(&body)
            .map_err(|e| backend_err(&self.id, utt_id, format!("POST {}: {e}", self.url)))
    }

    fn post_json<T: for<'de> Deserialize<'de>>(&self, utt_id: &str, omega: Option<f64>, audio: &Waveform) -> Result<T> {
        serde_json::from_reader(self.post(utt_id, omega, audio)?.into_reader())
            .map_err(|e| backend_err(&self.id, utt_id, format!("bad JSON response: {e}")))
    }
}

/// Response body is the enhanced WAV.
#[derive(Debug, Clone)]
pub struct HttpEnhancer(HttpClient);

impl HttpEnhancer {
    pub fn new(id: &str, url: &str, timeout: Duration) -> Self {
        Self(HttpClient::new(id, url, timeout))
    }
}

impl Enhancer for HttpEnhancer {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn enhance(&self, rec: &ManifestRecord, x: &Waveform) -> Result<Waveform> {
        let mut bytes = Vec::new();
        self.0
            .post(&rec.utt_id, None, x)?
            .into_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| backend_err(&self.0.id, &rec.utt_id, format!("reading response: {e}")))?;
        let y = decode_wav(&bytes, None).map_err(|e| backend_err(&self.0.id, &rec.utt_id, e.to_string()))?;
        check_enhanced(&self.0.id, &rec.utt_id, x, &y)?;
        Ok(y)
    }
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

/// Response body is `{"text": "..."}`.
#[derive(Debug, Clone)]
pub struct HttpRecognizer(HttpClient);

impl HttpRecognizer {
    pub fn new(id: &str, url: &str, timeout: Duration) -> Self {
        Self(HttpClient::new(id, url, timeout))
    }
}

impl Recognizer for HttpRecognizer {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn transcribe(&self, req: &RecognitionRequest<'_>) -> Result<String> {
        let r: TextResponse = self.0.post_json(req.utt_id, req.omega, req.audio)?;
        Ok(r.text)
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    sig: f64,
    bak: f64,
}

/// Response body is `{"sig": <float>, "bak": <float>}`.
#[derive(Debug, Clone)]
pub struct HttpScorer(HttpClient);

impl HttpScorer {
    pub fn new(id: &str, url: &str, timeout: Duration) -> Self {
        Self(HttpClient::new(id, url, timeout))
    }
}

impl Scorer for HttpScorer {
    fn id(&self) -> &str {
        &self.0.id
    }

    fn score(&self, rec: &ManifestRecord, w: &Waveform) -> Result<MosScore> {
        let r: ScoreResponse = self.0.post_json(&rec.utt_id, None, w)?;
        MosScore::new(r.sig, r.bak).map_err(|e| backend_err(&self.0.id, &rec.utt_id, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;

    /// Serves `n` requests, answering each with `reply(headers, body)`.
    fn serve(n: usize, reply: fn(&str, &[u8]) -> (String, Vec<u8>)) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming().take(n) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let (ctype, out) = reply(&headers, &body);
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    out.len()
                )
                .unwrap();
                stream.write_all(&out).unwrap();
            }
        });
        format!("http://{addr}/")
    }

    fn record() -> ManifestRecord {
        ManifestRecord {
            utt_id: "u7".into(),
            noisy_path: "x.wav".into(),
            enhanced_path: None,
            transcript: None,
            subset: "et_simu".parse().unwrap(),
            channel: None,
            clean_path: None,
            snr_db: None,
        }
    }

    #[test]
    fn enhancer_echoes_audio() {
        let url = serve(1, |_, body| ("audio/wav".into(), body.to_vec()));
        let x = Waveform::new(vec![0.5, -0.25, 0.0], 16000).unwrap();
        let y = HttpEnhancer::new("echo", &url, Duration::from_secs(5)).enhance(&record(), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn recognizer_gets_headers() {
        let url = serve(1, |headers, _| {
            let h = headers.to_ascii_lowercase();
            let utt = h.lines().find_map(|l| l.strip_prefix("x-utt-id:")).unwrap().trim().to_string();
            let omega = h.lines().find_map(|l| l.strip_prefix("x-omega:")).unwrap().trim().to_string();
            ("application/json".into(), format!(r#"{{"text":"{utt} {omega}"}}"#).into_bytes())
        });
        let w = Waveform::zeros(8, 16000).unwrap();
        let req = RecognitionRequest { utt_id: "u7", omega: Some(0.4), audio: &w };
        let text = HttpRecognizer::new("asr", &url, Duration::from_secs(5)).transcribe(&req).unwrap();
        assert_eq!(text, "u7 0.4");
    }

    #[test]
    fn scorer_validates_range() {
        let url = serve(2, |headers, _| {
            let body = if headers.contains("u7") { r#"{"sig":3.0,"bak":4.5}"# } else { r#"{"sig":9,"bak":1}"# };
            ("application/json".into(), body.as_bytes().to_vec())
        });
        let s = HttpScorer::new("dnsmos", &url, Duration::from_secs(5));
        let w = Waveform::zeros(8, 16000).unwrap();
        assert_eq!(s.score(&record(), &w).unwrap(), MosScore { sig: 3.0, bak: 4.5 });
        let mut other = record();
        other.utt_id = "zz".into();
        assert!(s.score(&other, &w).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_a_backend_error() {
        let w = Waveform::zeros(8, 16000).unwrap();
        let req = RecognitionRequest { utt_id: "u", omega: None, audio: &w };
        let err = HttpRecognizer::new("asr", "http://127.0.0.1:9/", Duration::from_secs(2))
            .transcribe(&req)
            .unwrap_err();
        assert!(matches!(err, crate::Error::Backend { .. }));
    }
}
