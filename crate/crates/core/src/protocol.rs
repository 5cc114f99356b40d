//! Line oriented text protocol.
//!
//! A request is one LF terminated line: an uppercase verb followed by
//! space separated arguments. An argument is written inside double quotes
//! when it is empty or contains a space, a double quote or a backslash;
//! inside quotes `\"` and `\\` are the only escapes. CR and LF can never
//! appear inside an argument.
//!
//! A response is a status line (`OK` or `ERR <code> <message>`), zero or
//! more data rows each starting with `|`, and a terminating line holding a
//! single `.`. Because every row carries the `|` prefix a payload of `.`
//! goes out as `|.` and can never be mistaken for the terminator.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verb {
    CreateDir,
    RemoveDir,
    AddAttr,
    RemoveAttr,
    AddEntry,
    SetAttr,
    DelEntry,
    GetAttr,
    Find,
    Dump,
    Ping,
    Quit,
    Subscribe,
    Unsubscribe,
    SnapshotBegin,
    SnapshotEnd,
    Log,
    Ack,
    Resume,
    /// Prefix line marking a command forwarded by another federation node.
    Via,
}

impl Verb {
    pub const ALL: [Verb; 20] = [
        Verb::CreateDir,
        Verb::RemoveDir,
        Verb::AddAttr,
        Verb::RemoveAttr,
        Verb::AddEntry,
        Verb::SetAttr,
        Verb::DelEntry,
        Verb::GetAttr,
        Verb::Find,
        Verb::Dump,
        Verb::Ping,
        Verb::Quit,
        Verb::Subscribe,
        Verb::Unsubscribe,
        Verb::SnapshotBegin,
        Verb::SnapshotEnd,
        Verb::Log,
        Verb::Ack,
        Verb::Resume,
        Verb::Via,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::CreateDir => "CREATEDIR",
            Verb::RemoveDir => "REMOVEDIR",
            Verb::AddAttr => "ADDATTR",
            Verb::RemoveAttr => "REMOVEATTR",
            Verb::AddEntry => "ADDENTRY",
            Verb::SetAttr => "SETATTR",
            Verb::DelEntry => "DELENTRY",
            Verb::GetAttr => "GETATTR",
            Verb::Find => "FIND",
            Verb::Dump => "DUMP",
            Verb::Ping => "PING",
            Verb::Quit => "QUIT",
            Verb::Subscribe => "SUBSCRIBE",
            Verb::Unsubscribe => "UNSUBSCRIBE",
            Verb::SnapshotBegin => "SNAPSHOT_BEGIN",
            Verb::SnapshotEnd => "SNAPSHOT_END",
            Verb::Log => "LOG",
            Verb::Ack => "ACK",
            Verb::Resume => "RESUME",
            Verb::Via => "VIA",
        }
    }

    /// Client verbs that change catalog state.
    pub fn is_mutating(self) -> bool {
        matches!(
            self,
            Verb::CreateDir
                | Verb::RemoveDir
                | Verb::AddAttr
                | Verb::RemoveAttr
                | Verb::AddEntry
                | Verb::SetAttr
                | Verb::DelEntry
        )
    }

    pub fn is_replication(self) -> bool {
        matches!(
            self,
            Verb::Subscribe
                | Verb::Unsubscribe
                | Verb::SnapshotBegin
                | Verb::SnapshotEnd
                | Verb::Log
                | Verb::Ack
                | Verb::Resume
        )
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verb {
    type Err = Error;

    fn from_str(s: &str) -> Result<Verb> {
        Verb::ALL.iter().copied().find(|v| v.as_str() == s).ok_or(Error::UnknownVerb)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub verb: Verb,
    pub args: Vec<String>,
}

impl Request {
    pub fn new<I, S>(verb: Verb, args: I) -> Request
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Request { verb, args: args.into_iter().map(Into::into).collect() }
    }

    /// The wire line without its trailing LF.
    pub fn to_line(&self) -> String {
        let mut line = self.verb.as_str().to_string();
        for arg in &self.args {
            line.push(' ');
            push_token(&mut line, arg);
        }
        line
    }

    pub fn arg(&self, idx: usize) -> Result<&str> {
        self.args
            .get(idx)
            .map(String::as_str)
            .ok_or_else(|| Error::BadArguments(format!("{} needs argument {}", self.verb, idx + 1)))
    }

    pub fn expect_args(&self, min: usize, max: usize) -> Result<()> {
        let n = self.args.len();
        if n >= min && n <= max {
            return Ok(());
        }
        let wanted = match (min, max) {
            (a, b) if a == b => format!("{a}"),
            (a, usize::MAX) => format!("at least {a}"),
            (a, b) => format!("{a} to {b}"),
        };
        Err(Error::BadArguments(format!("{} takes {wanted} arguments, got {n}", self.verb)))
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

fn needs_quotes(arg: &str) -> bool {
    arg.is_empty() || arg.contains([' ', '"', '\\'])
}

fn push_token(out: &mut String, arg: &str) {
    if needs_quotes(arg) {
        out.push('"');
        for c in arg.chars() {
            if c == '"' || c == '\\' {
                out.push('\\');
            }
            out.push(c);
        }
        out.push('"');
    } else {
        out.push_str(arg);
    }
}

/// Joins tokens with the same quoting rules as request arguments.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        push_token(&mut out, t.as_ref());
    }
    out
}

/// Encodes one request line, LF included.
pub fn encode_request(verb: &str, args: &[String]) -> Result<String> {
    let verb: Verb = verb.parse()?;
    if let Some(bad) = args.iter().find(|a| a.contains(['\n', '\r'])) {
        return Err(Error::BadArguments(format!("argument contains a line break: {bad:?}")));
    }
    let mut line = Request { verb, args: args.to_vec() }.to_line();
    line.push('\n');
    Ok(line)
}

/// Splits a line into tokens honoring quotes and escapes.
pub fn tokenize(line: &str) -> Result<Vec<String>> {
    let malformed = |m: &str| Error::MalformedLine(m.to_string());
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek() == Some(&' ') {
            chars.next();
        }
        let Some(&first) = chars.peek() else { break };
        let mut tok = String::new();
        if first == '"' {
            chars.next();
            loop {
                match chars.next() {
                    None => return Err(malformed("unterminated quote")),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some(c @ ('"' | '\\')) => tok.push(c),
                        _ => return Err(malformed("bad escape")),
                    },
                    Some('\n' | '\r') => return Err(malformed("line break inside token")),
                    Some(c) => tok.push(c),
                }
            }
            match chars.peek() {
                None | Some(' ') => {}
                Some(_) => return Err(malformed("text after closing quote")),
            }
        } else {
            while let Some(&c) = chars.peek() {
                match c {
                    ' ' => break,
                    '"' => return Err(malformed("quote inside unquoted token")),
                    '\\' => return Err(malformed("bad escape")),
                    '\n' | '\r' => return Err(malformed("line break inside token")),
                    _ => {
                        tok.push(c);
                        chars.next();
                    }
                }
            }
        }
        tokens.push(tok);
    }
    Ok(tokens)
}

/// Parses one request line. A single trailing LF (or CRLF) is accepted.
pub fn parse_request(line: &str) -> Result<Request> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut tokens = tokenize(line)?.into_iter();
    let verb = tokens.next().ok_or_else(|| Error::MalformedLine("empty verb".into()))?;
    if verb.is_empty() {
        return Err(Error::MalformedLine("empty verb".into()));
    }
    Ok(Request { verb: verb.parse()?, args: tokens.collect() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok(Vec<String>),
    Err { code: u16, message: String },
}

impl Response {
    pub fn ok() -> Response {
        Response::Ok(Vec::new())
    }

    pub fn rows<I, S>(rows: I) -> Response
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Response::Ok(rows.into_iter().map(Into::into).collect())
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Response::Ok(_))
    }

    pub fn into_result(self) -> Result<Vec<String>> {
        match self {
            Response::Ok(rows) => Ok(rows),
            Response::Err { code, message } => Err(Error::from_wire(code, &message)),
        }
    }

    pub fn encode(&self) -> String {
        match self {
            Response::Ok(_) => encode_response(&Ok(self.rows_ref().to_vec())),
            Response::Err { code, message } => {
                format!("ERR {code} {}\n.\n", message.replace(['\n', '\r'], " "))
            }
        }
    }

    fn rows_ref(&self) -> &[String] {
        match self {
            Response::Ok(rows) => rows,
            Response::Err { .. } => &[],
        }
    }
}

impl From<Error> for Response {
    fn from(e: Error) -> Response {
        Response::Err { code: e.code(), message: e.to_string() }
    }
}

impl From<Result<Vec<String>>> for Response {
    fn from(r: Result<Vec<String>>) -> Response {
        match r {
            Ok(rows) => Response::Ok(rows),
            Err(e) => e.into(),
        }
    }
}

/// Frames a result: `OK`, `|`-prefixed rows and `.` on success; `ERR <code>
/// <message>` and `.` on failure.
pub fn encode_response(result: &Result<Vec<String>>) -> String {
    let mut out = String::new();
    match result {
        Ok(rows) => {
            out.push_str("OK\n");
            for row in rows {
                out.push('|');
                out.push_str(&row.replace(['\n', '\r'], " "));
                out.push('\n');
            }
        }
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            out.push_str(&format!("ERR {} {}\n", e.code(), msg));
        }
    }
    out.push_str(".\n");
    out
}

/// Reads one framed response. Returns `Ok(None)` on a clean EOF before the
/// status line.
pub fn read_response<R: BufRead>(reader: &mut R) -> std::io::Result<Option<Response>> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let status = trim_eol(&line).to_string();
    let mut rows = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "response not terminated"));
        }
        let l = trim_eol(&line);
        if l == "." {
            break;
        }
        match l.strip_prefix('|') {
            Some(row) => rows.push(row.to_string()),
            None => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("data row without | prefix: {l:?}"),
                ))
            }
        }
    }
    parse_status(&status, rows)
        .map(Some)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

/// Parses a complete response text (as produced by [`encode_response`]).
pub fn parse_response(text: &str) -> Result<Response> {
    let mut cursor = std::io::Cursor::new(text.as_bytes());
    read_response(&mut cursor)
        .map_err(|e| Error::MalformedLine(e.to_string()))?
        .ok_or_else(|| Error::MalformedLine("empty response".into()))
}

fn parse_status(status: &str, rows: Vec<String>) -> Result<Response> {
    if status == "OK" {
        return Ok(Response::Ok(rows));
    }
    let rest = status
        .strip_prefix("ERR ")
        .ok_or_else(|| Error::MalformedLine(format!("bad status line {status:?}")))?;
    let (code, message) = rest.split_once(' ').unwrap_or((rest, ""));
    let code = code
        .parse()
        .map_err(|_| Error::MalformedLine(format!("bad error code {code:?}")))?;
    Ok(Response::Err { code, message: message.to_string() })
}

fn trim_eol(line: &str) -> &str {
    let line = line.strip_suffix('\n').unwrap_or(line);
    line.strip_suffix('\r').unwrap_or(line)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_request("CREATEDIR", &["/exp".into()]).unwrap(), "CREATEDIR /exp\n");
        assert_eq!(encode_request("ADDENTRY", &["/exp/f 1".into()]).unwrap(), "ADDENTRY \"/exp/f 1\"\n");
        assert_eq!(encode_request("FROB", &[]), Err(Error::UnknownVerb));
        assert!(encode_request("PING", &["a\nb".into()]).is_err());
    }

    #[test]
    fn parse_examples() {
        let r = parse_request("FIND /exp \"run > 3\"\n").unwrap();
        assert_eq!(r.verb, Verb::Find);
        assert_eq!(r.args, vec!["/exp", "run > 3"]);
        assert!(matches!(parse_request("ADDENTRY \"unterminated\n"), Err(Error::MalformedLine(_))));
        assert!(matches!(parse_request("\n"), Err(Error::MalformedLine(_))));
        assert!(matches!(parse_request("PING \"a\\n\""), Err(Error::MalformedLine(_))));
        assert!(matches!(parse_request("PING a\"b"), Err(Error::MalformedLine(_))));
        assert!(matches!(parse_request("PING \"a\"b"), Err(Error::MalformedLine(_))));
        assert_eq!(parse_request("ping"), Err(Error::UnknownVerb));
        assert_eq!(parse_request("PING\r\n").unwrap(), Request::new(Verb::Ping, Vec::<String>::new()));
    }

    #[test]
    fn empty_argument_is_quoted() {
        let line = encode_request("FIND", &["/a".into(), String::new()]).unwrap();
        assert_eq!(line, "FIND /a \"\"\n");
        assert_eq!(parse_request(&line).unwrap().args, vec!["/a".to_string(), String::new()]);
    }

    #[test]
    fn response_framing() {
        assert_eq!(encode_response(&Ok(vec![])), "OK\n.\n");
        assert_eq!(encode_response(&Ok(vec!["f1".into(), "f2".into()])), "OK\n|f1\n|f2\n.\n");
        assert_eq!(encode_response(&Err(Error::NotFound)), "ERR 404 not found\n.\n");
        assert_eq!(encode_response(&Ok(vec![".".into()])), "OK\n|.\n.\n");
    }

    #[test]
    fn read_response_handles_dot_payload() {
        let text = "OK\n|.\n|x\n.\n";
        assert_eq!(parse_response(text).unwrap(), Response::rows([".", "x"]));
        let err = parse_response("ERR 404 not found\n.\n").unwrap();
        assert_eq!(err.into_result(), Err(Error::NotFound));
        assert!(parse_response("OK\n|x\n").is_err());
    }

    fn arb_arg() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                Just(' '),
                Just('"'),
                Just('\\'),
                Just('.'),
                Just('|'),
                prop::char::range('a', 'z'),
                prop::char::range('0', '9'),
                any::<char>().prop_filter("no line breaks", |c| *c != '\n' && *c != '\r'),
            ],
            0..12,
        )
        .prop_map(|cs| cs.into_iter().collect())
    }

    proptest! {
        #[test]
        fn parse_inverts_encode(verb in prop::sample::select(Verb::ALL.to_vec()), args in prop::collection::vec(arb_arg(), 0..6)) {
            let line = encode_request(verb.as_str(), &args).unwrap();
            prop_assert!(line.ends_with('\n'));
            prop_assert_eq!(line.matches('\n').count(), 1);
            let req = parse_request(&line).unwrap();
            prop_assert_eq!(req.verb, verb);
            prop_assert_eq!(req.args, args);
        }

        #[test]
        fn responses_round_trip(rows in prop::collection::vec(arb_arg(), 0..6)) {
            let text = encode_response(&Ok(rows.clone()));
            prop_assert!(text.ends_with("\n.\n"));
            prop_assert_eq!(parse_response(&text).unwrap(), Response::Ok(rows));
        }
    }
}
