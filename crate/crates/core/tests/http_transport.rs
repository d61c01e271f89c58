use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use semclip_core::backends::{
    AnswerRequest, AnswerResponse, Answerer, EncoderRequest, EncoderResponse, Endpoint, ExternalAnswerer,
    ExternalEncoder, Outcome, Query, RetryPolicy, View, ViewSource,
};
use semclip_core::imaging::{BBox, RasterImage};
use semclip_core::scoring::EncoderProvider;

struct Exchange {
    path: String,
    body: String,
}

/// Serves `replies.len()` connections, one request each, and returns what
/// it received.
fn serve(replies: Vec<(u16, Box<dyn Fn(&str) -> String + Send>)>) -> (String, thread::JoinHandle<Vec<Exchange>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body = String::from_utf8(body).unwrap();
            let out = reply(&body);
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{out}",
                out.len()
            )
            .unwrap();
            seen.push(Exchange { path, body });
        }
        seen
    });
    (base, handle)
}

fn retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(5),
        timeout: Duration::from_secs(10),
    }
}

fn echo_answer(body: &str) -> String {
    let req: AnswerRequest = serde_json::from_str(body).unwrap();
    serde_json::to_string(&AnswerResponse {
        request_id: req.request_id,
        outcome: Outcome::Ok(format!("{} images", req.images.len())),
    })
    .unwrap()
}

fn view(id: &str) -> View {
    let image = Arc::new(RasterImage::filled(8, 8, [10, 20, 30]).unwrap());
    View::new(
        image,
        ViewSource {
            instance_id: id.into(),
            bbox: BBox::new(0, 0, 8, 8),
        },
    )
}

#[test]
fn answers_over_http_and_retries_server_errors() {
    let (base, server) = serve(vec![
        (503, Box::new(|_: &str| "busy".to_string())),
        (200, Box::new(echo_answer)),
    ]);
    let answerer = ExternalAnswerer::connect(&Endpoint::parse(&base).unwrap(), retry()).unwrap();
    let views = [view("a"), view("a")];
    let answer = answerer
        .answer(&Query {
            request_id: "a:eval:0".into(),
            question: "What shape is the red object?",
            options: None,
            views: &views,
            temperature: 0.0,
        })
        .unwrap();
    assert_eq!(answer, "2 images");
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen.iter().all(|e| e.path == "/answer"));
    assert_eq!(seen[0].body, seen[1].body);
}

#[test]
fn remote_errors_are_not_retried() {
    let (base, server) = serve(vec![(
        200,
        Box::new(|body: &str| {
            let req: AnswerRequest = serde_json::from_str(body).unwrap();
            serde_json::to_string(&AnswerResponse {
                request_id: req.request_id,
                outcome: Outcome::Error("model overloaded".into()),
            })
            .unwrap()
        }),
    )]);
    let answerer = ExternalAnswerer::connect(&Endpoint::parse(&base).unwrap(), retry()).unwrap();
    let views = [view("b")];
    let err = answerer
        .answer(&Query {
            request_id: "b:eval:0".into(),
            question: "q",
            options: None,
            views: &views,
            temperature: 0.0,
        })
        .unwrap_err();
    assert!(err.to_string().contains("model overloaded"), "{err}");
    assert_eq!(server.join().unwrap().len(), 1);
}

#[test]
fn embeddings_over_http() {
    let reply = |body: &str| {
        let req: EncoderRequest = serde_json::from_str(body).unwrap();
        serde_json::to_string(&EncoderResponse {
            request_id: req.request_id,
            outcome: Outcome::Ok(vec![1.0, 0.5, req.payload.len() as f64]),
        })
        .unwrap()
    };
    let (base, server) = serve(vec![(200, Box::new(reply)), (200, Box::new(reply))]);
    let encoder = ExternalEncoder::connect(&Endpoint::parse(&base).unwrap(), retry()).unwrap();
    let text = encoder.embed_text("abc").unwrap();
    assert_eq!(text.values(), &[1.0, 0.5, 3.0]);
    let img = encoder
        .embed_image(&RasterImage::filled(4, 4, [0, 0, 0]).unwrap())
        .unwrap();
    assert_eq!(img.dim(), 3);
    let seen = server.join().unwrap();
    assert!(seen.iter().all(|e| e.path == "/embed"));
    assert!(seen[0].body.contains(r#""kind":"text""#), "{}", seen[0].body);
}
