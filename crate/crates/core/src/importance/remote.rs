use std::io::Read;
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::importance::{parse_annotation, ObjectImportance};
use crate::scene::{io::encode_ppm, Image, SceneObject};

#[derive(Clone, Debug)]
pub struct RemoteOptions {
    pub endpoint: String,
    pub timeout: Duration,
    /// Total number of requests before giving up on transport failures.
    pub attempts: u32,
    pub backoff: Duration,
}

impl RemoteOptions {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteOptions {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

const BOUNDARY: &str = "----saoosc-annotation-boundary-7d41";

fn multipart_body(ppm: &[u8], detections: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(ppm.len() + detections.len() + 512);
    let mut part = |name: &str, filename: &str, ctype: &str, data: &[u8]| {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{filename}\"\r\nContent-Type: {ctype}\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    };
    part("image", "image.ppm", "image/x-portable-pixmap", ppm);
    part(
        "detections",
        "detections.json",
        "application/json",
        detections,
    );
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

/// Sends the image and its detections to an annotation service and parses
/// the returned `{"<id>": level}` mapping.
///
/// Transport failures and 5xx responses are retried; a response that arrives
/// but does not parse is returned as a schema error immediately.
pub fn fetch_remote_annotation(
    image: &Image,
    detections: &[SceneObject],
    opts: &RemoteOptions,
) -> Result<Vec<ObjectImportance>> {
    if opts.attempts == 0 {
        return Err(Error::Config(
            "remote annotator needs at least one attempt".into(),
        ));
    }
    let detections_json = serde_json::to_vec(detections).expect("scene objects serialize");
    let body = multipart_body(&encode_ppm(image)?, &detections_json);
    let agent = ureq::AgentBuilder::new().timeout(opts.timeout).build();
    let content_type = format!("multipart/form-data; boundary={BOUNDARY}");

    let mut last = String::new();
    for attempt in 1..=opts.attempts {
        match agent
            .post(&opts.endpoint)
            .set("Content-Type", &content_type)
            .send_bytes(&body)
        {
            Ok(resp) => {
                let mut text = String::new();
                resp.into_reader()
                    .take(1 << 20)
                    .read_to_string(&mut text)
                    .map_err(|e| Error::Transport {
                        attempts: attempt,
                        detail: format!("reading response: {e}"),
                    })?;
                return parse_annotation(&text);
            }
            Err(ureq::Error::Status(code, resp)) if code < 500 => {
                let text = resp.into_string().unwrap_or_default();
                return Err(Error::Transport {
                    attempts: attempt,
                    detail: format!("HTTP {code}: {}", text.trim()),
                });
            }
            Err(e) => last = e.to_string(),
        }
        log::warn!(
            "annotation request {attempt}/{} failed: {last}",
            opts.attempts
        );
        if attempt < opts.attempts {
            thread::sleep(opts.backoff);
        }
    }
    Err(Error::Transport {
        attempts: opts.attempts,
        detail: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    /// Serves `responses` in order, one per connection, recording request bodies.
    fn stub(responses: Vec<&'static str>) -> (String, thread::JoinHandle<Vec<Vec<u8>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/annotate", listener.local_addr().unwrap());
        let h = thread::spawn(move || {
            let mut bodies = Vec::new();
            for body in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut req = vec![0u8; len];
                reader.read_exact(&mut req).unwrap();
                bodies.push(req);
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, h)
    }

    fn fast(url: String) -> RemoteOptions {
        RemoteOptions {
            timeout: Duration::from_millis(500),
            backoff: Duration::from_millis(1),
            ..RemoteOptions::new(url)
        }
    }

    #[test]
    fn returns_parsed_mapping_and_sends_both_parts() {
        let (url, h) = stub(vec![r#"{"1":2}"#]);
        let img = Image::filled(8, 8, [10.0, 20.0, 30.0]);
        let got = fetch_remote_annotation(&img, &[], &fast(url)).unwrap();
        assert_eq!(
            got,
            vec![ObjectImportance {
                object_id: 1,
                level: 2
            }]
        );
        let body = String::from_utf8_lossy(&h.join().unwrap()[0]).into_owned();
        assert!(body.contains("name=\"image\""));
        assert!(body.contains("name=\"detections\""));
        assert!(body.contains("P6"));
    }

    #[test]
    fn malformed_body_is_schema_error() {
        let (url, _h) = stub(vec!["the pedestrian looks important"]);
        let img = Image::filled(8, 8, [0.0; 3]);
        assert!(matches!(
            fetch_remote_annotation(&img, &[], &fast(url)),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn unresponsive_endpoint_exhausts_retries() {
        // Accepts connections but never answers.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let seen = Arc::new(AtomicU32::new(0));
        let counter = seen.clone();
        thread::spawn(move || {
            let mut held = Vec::new();
            for s in listener.incoming() {
                counter.fetch_add(1, Ordering::SeqCst);
                held.push(s);
            }
        });
        let opts = RemoteOptions {
            timeout: Duration::from_millis(150),
            ..fast(url)
        };
        let img = Image::filled(8, 8, [0.0; 3]);
        match fetch_remote_annotation(&img, &[], &opts) {
            Err(Error::Transport { attempts: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(seen.load(Ordering::SeqCst), 3);
    }
}
