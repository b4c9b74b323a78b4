use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::thread;

use basis::data::{fetch_http, DataError};

/// Serves `count` requests: `/data.csv` gets the body, anything else a 404.
fn serve(body: &'static [u8], count: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming().take(count) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request = String::new();
            reader.read_line(&mut request).unwrap();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
            }
            let (status, payload): (&str, &[u8]) =
                if request.starts_with("GET /data.csv ") { ("200 OK", body) } else { ("404 Not Found", b"missing") };
            write!(stream, "HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", payload.len()).unwrap();
            stream.write_all(payload).unwrap();
        }
    });
    format!("http://{addr}")
}

const BODY: &[u8] = b"x,y\n1,2\n3,\xff4\n";

#[test]
fn downloads_bytes_exactly() {
    let base = serve(BODY, 2);
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("sub/data.csv");
    assert_eq!(fetch_http(&format!("{base}/data.csv"), &dest).unwrap(), BODY.len() as u64);
    assert_eq!(std::fs::read(&dest).unwrap(), BODY);
    fetch_http(&format!("{base}/data.csv"), &dest).unwrap();
    assert_eq!(std::fs::read(&dest).unwrap(), BODY);
}

#[test]
fn reports_http_status() {
    let base = serve(BODY, 1);
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("x.csv");
    match fetch_http(&format!("{base}/nope.csv"), &dest) {
        Err(DataError::Http { status: Some(404), .. }) => {}
        other => panic!("expected 404, got {other:?}"),
    }
    assert!(!dest.exists());
}
