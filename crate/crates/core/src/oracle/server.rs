use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::protocol::{Request, Response, BAD_INPUT, BAD_REQUEST, BUDGET_EXHAUSTED};
use super::{LocalOracle, Oracle};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// TCP front-end for a [`LocalOracle`]; one thread per client.
///
/// The budget lives in the wrapped oracle's ledger, so it is enforced here and
/// shared by every connection.
pub struct OracleServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl OracleServer {
    pub fn bind(addr: &str, oracle: Arc<LocalOracle>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let oracle = Arc::clone(&oracle);
                std::thread::spawn(move || {
                    let _ = handle_client(stream, &oracle);
                });
            }
        });
        Ok(Self { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

fn handle_client(stream: TcpStream, oracle: &LocalOracle) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = respond(&line, oracle);
        let mut text = serde_json::to_string(&response)?;
        text.push('\n');
        writer.write_all(text.as_bytes())?;
    }
    Ok(())
}

/// Answers one request line.
pub(crate) fn respond(line: &str, oracle: &LocalOracle) -> Response {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return Response::error(BAD_REQUEST, Some(e.to_string())),
    };
    match request {
        Request::Meta => {
            let meta = oracle.meta();
            let ledger = oracle.ledger();
            Response::Meta { d: meta.d, k: meta.k, budget: meta.budget, used: ledger.used_total(), remaining: ledger.remaining() }
        }
        Request::Query { phase, inputs } => {
            let batch = match Tensor::from_rows(&inputs) {
                Ok(b) => b,
                Err(e) => return Response::error(BAD_INPUT, Some(e.to_string())),
            };
            match oracle.query(&batch, phase) {
                Ok(probs) => {
                    let ledger = oracle.ledger();
                    Response::Probs { probs: probs.to_rows(), used: ledger.used_total(), remaining: ledger.remaining() }
                }
                Err(Error::BudgetExhausted { .. }) => Response::error(BUDGET_EXHAUSTED, None),
                Err(e) => Response::error(BAD_INPUT, Some(e.to_string())),
            }
        }
    }
}
