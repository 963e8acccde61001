//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use trialnli::{ClinicalTrial, Label, Sample, SampleType, SectionId, TrialIndex};

pub fn trial(id: &str) -> ClinicalTrial {
    ClinicalTrial::new(
        id,
        [
            (
                SectionId::Interventions,
                vec![
                    "INTERVENTION 1:".into(),
                    format!("  {id} drug A 10 mg daily"),
                ],
            ),
            (
                SectionId::EligibilityCriteria,
                vec!["Inclusion Criteria:".into(), "  Adults over 18".into()],
            ),
            (
                SectionId::Results,
                vec![
                    "Outcome Measurement:".into(),
                    "  Overall response rate".into(),
                    "Results 1:".into(),
                    "  42 percent".into(),
                ],
            ),
            (
                SectionId::AdverseEvents,
                vec!["Adverse Events 1:".into(), "  Nausea 3/40 (7.5%)".into()],
            ),
        ],
    )
    .unwrap()
}

pub fn trials(ids: &[&str]) -> TrialIndex {
    ids.iter().map(|id| (id.to_string(), trial(id))).collect()
}

pub fn single(id: &str, statement: &str, section: SectionId, gold: Option<Label>) -> Sample {
    Sample {
        id: id.into(),
        statement: statement.into(),
        kind: SampleType::Single,
        section,
        primary_trial: "NCT0001".into(),
        secondary_trial: None,
        gold,
    }
}

pub fn comparison(id: &str, statement: &str, section: SectionId, gold: Option<Label>) -> Sample {
    Sample {
        id: id.into(),
        statement: statement.into(),
        kind: SampleType::Comparison,
        section,
        primary_trial: "NCT0001".into(),
        secondary_trial: Some("NCT0002".into()),
        gold,
    }
}

/// `n` labeled samples over two trials, alternating gold labels.
pub fn labeled(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let gold = if i % 2 == 0 {
                Label::Entailment
            } else {
                Label::Contradiction
            };
            let section = SectionId::ALL[i % SectionId::ALL.len()];
            let stmt = format!("statement number {i} about the trial");
            if i % 3 == 0 {
                comparison(&format!("s{i:03}"), &stmt, section, Some(gold))
            } else {
                single(&format!("s{i:03}"), &stmt, section, Some(gold))
            }
        })
        .collect()
}

pub fn answer(label: Label) -> String {
    format!(r#"{{"answer": "{label}"}}"#)
}

/// Seen by a [`MockServer`] handler.
#[derive(Debug, Clone)]
pub struct MockRequest {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl MockRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).unwrap()
    }
}

type Handler = dyn Fn(&MockRequest) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server on a loopback port, one request per connection.
pub struct MockServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<MockRequest>>>,
}

impl MockServer {
    pub fn start(handler: impl Fn(&MockRequest) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handler: Arc<Handler> = Arc::new(handler);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let log = Arc::clone(&log);
                let handler = Arc::clone(&handler);
                thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        MockServer {
            base_url: format!("http://{addr}/v1"),
            requests,
        }
    }

    pub fn hits(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<MockRequest>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut headers = Vec::new();
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let len = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let req = MockRequest {
        path,
        headers,
        body: String::from_utf8(body).unwrap(),
    };
    let (status, reply) = handler(&req);
    log.lock().unwrap().push(req);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
}

/// An OpenAI-style completion body carrying `content`.
pub fn completion(content: &str) -> String {
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
    })
    .to_string()
}

/// Deterministic OPRO stand-in for the model.
///
/// Meta prompts get the next reply from `proposals` (cycling). Prediction
/// prompts are answered correctly for sample `i` iff `(7 * i) % 10 < skill`,
/// where `skill` is the number after "skill " in the instruction (0 if none).
/// Works with [`labeled`] samples.
pub fn opro_backend(
    proposals: Vec<String>,
    meta_prompts: Arc<Mutex<Vec<String>>>,
) -> trialnli::llm::FnBackend {
    let next = Mutex::new(0usize);
    trialnli::llm::FnBackend::new(move |req| {
        let text = req.text();
        if text.contains("Write a new instruction") {
            meta_prompts.lock().unwrap().push(text);
            let mut n = next.lock().unwrap();
            let reply = proposals[*n % proposals.len()].clone();
            *n += 1;
            return Ok(reply);
        }
        let instruction = text.lines().next().unwrap_or("");
        let skill: usize = instruction
            .split("skill ")
            .nth(1)
            .and_then(|r| r.split(|c: char| !c.is_ascii_digit()).next())
            .and_then(|d| d.parse().ok())
            .unwrap_or(0);
        let i: usize = text
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Statement: statement number "))
            .and_then(|r| r.split(' ').next())
            .and_then(|d| d.parse().ok())
            .expect("prediction prompt for a labeled() sample");
        let gold = if i % 2 == 0 {
            Label::Entailment
        } else {
            Label::Contradiction
        };
        let label = if (7 * i) % 10 < skill {
            gold
        } else {
            gold.flipped()
        };
        Ok(answer(label))
    })
}
