use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;

use super::protocol::{Request, Response, BUDGET_EXHAUSTED};
use super::{check_query, Oracle, OracleMeta, Phase, QueryLedger};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn call(&mut self, request: &Request) -> Result<Response> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(Error::Protocol("server closed the connection".into()));
        }
        Ok(serde_json::from_str(&reply)?)
    }
}

/// Oracle client for a remote [`super::OracleServer`].
///
/// Always strict: the protocol carries probabilities only. The ledger is a
/// client-side mirror; totals come from the server, phase splits from the
/// requests this client made.
pub struct RemoteOracle {
    meta: OracleMeta,
    conn: Mutex<Connection>,
    ledger: Mutex<QueryLedger>,
}

impl RemoteOracle {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut conn = Connection { reader: BufReader::new(stream.try_clone()?), writer: stream };
        let (meta, used) = match conn.call(&Request::Meta)? {
            Response::Meta { d, k, budget, used, .. } => (OracleMeta { d, k, budget }, used),
            other => return Err(Error::Protocol(format!("unexpected reply to meta: {other:?}"))),
        };
        let mut ledger = QueryLedger::new(meta.budget);
        ledger.used_student_phase = used;
        Ok(Self { meta, conn: Mutex::new(conn), ledger: Mutex::new(ledger) })
    }
}

impl Oracle for RemoteOracle {
    fn meta(&self) -> OracleMeta {
        self.meta
    }

    fn query(&self, inputs: &Tensor, phase: Phase) -> Result<Tensor> {
        check_query(inputs, self.meta.d)?;
        let request = Request::Query { phase, inputs: inputs.to_rows() };
        let reply = self.conn.lock().unwrap_or_else(|p| p.into_inner()).call(&request)?;
        let mut ledger = self.ledger.lock().unwrap_or_else(|p| p.into_inner());
        match reply {
            Response::Probs { probs, used, .. } => {
                let out = Tensor::from_rows(&probs)?;
                if out.rows() != inputs.rows() || out.cols() != self.meta.k {
                    return Err(Error::Protocol("probability batch has the wrong shape".into()));
                }
                let n = inputs.rows() as u64;
                match phase {
                    Phase::Generator => ledger.used_generator_phase += n,
                    Phase::Student => ledger.used_student_phase += n,
                    Phase::Evaluation => ledger.evaluation_queries += n,
                }
                // Other clients may share the budget; absorb their usage.
                let mine = ledger.used_total();
                if used > mine {
                    ledger.used_student_phase += used - mine;
                }
                Ok(out)
            }
            Response::Error { error, .. } if error == BUDGET_EXHAUSTED => {
                let remaining = ledger.remaining();
                if remaining < inputs.rows() as u64 && remaining == 0 {
                    ledger.exhausted = true;
                }
                Err(Error::BudgetExhausted { requested: inputs.rows() as u64, remaining })
            }
            Response::Error { error, detail } => Err(Error::Protocol(format!("{error}: {}", detail.unwrap_or_default()))),
            Response::Meta { .. } => Err(Error::Protocol("meta reply to a query".into())),
        }
    }

    fn ledger(&self) -> QueryLedger {
        self.ledger.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn is_strict(&self) -> bool {
        true
    }
}
