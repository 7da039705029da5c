//! Edge-server and user-equipment session state machines.

use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EsState {
    Idle,
    Inferring,
    Transmitting,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EsEvent {
    /// A prompt arrived.
    Request,
    /// The seed is encoded and framed.
    SeedReady,
    /// The last block left the transmitter.
    Sent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UeState {
    Idle,
    Receiving,
    Decoding,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UeEvent {
    /// A frame header arrived.
    Header,
    /// All payload blocks are in.
    Complete,
    /// The image is decoded.
    Decoded,
}

pub trait Machine: Copy + Eq + std::fmt::Debug {
    type Event: Copy + std::fmt::Debug;
    fn next(self, event: Self::Event) -> Option<Self>;
}

impl Machine for EsState {
    type Event = EsEvent;
    fn next(self, event: EsEvent) -> Option<Self> {
        use EsEvent::*;
        use EsState::*;
        match (self, event) {
            (Idle, Request) => Some(Inferring),
            (Inferring, SeedReady) => Some(Transmitting),
            (Transmitting, Sent) => Some(Done),
            _ => None,
        }
    }
}

impl Machine for UeState {
    type Event = UeEvent;
    fn next(self, event: UeEvent) -> Option<Self> {
        use UeEvent::*;
        use UeState::*;
        match (self, event) {
            (Idle, Header) => Some(Receiving),
            (Receiving, Complete) => Some(Decoding),
            (Decoding, Decoded) => Some(Done),
            _ => None,
        }
    }
}

/// A state machine that rejects illegal events and keeps its state.
#[derive(Debug, Clone)]
pub struct Session<S: Machine> {
    state: S,
    history: Vec<S>,
}

impl<S: Machine> Session<S> {
    pub fn new(initial: S) -> Self {
        Session { state: initial, history: vec![initial] }
    }

    pub fn state(&self) -> S {
        self.state
    }

    /// Every state visited, starting with the initial one.
    pub fn history(&self) -> &[S] {
        &self.history
    }

    pub fn fire(&mut self, event: S::Event) -> Result<S, ProtocolError> {
        match self.state.next(event) {
            Some(s) => {
                self.state = s;
                self.history.push(s);
                Ok(s)
            }
            None => Err(ProtocolError::IllegalTransition(format!(
                "{event:?} in state {:?}",
                self.state
            ))),
        }
    }
}

pub type EsSession = Session<EsState>;
pub type UeSession = Session<UeState>;

impl Default for EsSession {
    fn default() -> Self {
        Session::new(EsState::Idle)
    }
}

impl Default for UeSession {
    fn default() -> Self {
        Session::new(UeState::Idle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn legal<S: Machine + std::hash::Hash>(path: &[S], allowed: &[(S, S)]) -> bool {
        path.windows(2).all(|w| allowed.contains(&(w[0], w[1])))
    }

    /// Every event sequence up to `depth` keeps the session on the allowed
    /// edges, and rejected events leave the state untouched.
    fn exhaust<S: Machine + std::hash::Hash>(init: S, events: &[S::Event], allowed: &[(S, S)], depth: usize) {
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        let mut checked = 0;
        while let Some(seq) = stack.pop() {
            let mut s = Session::new(init);
            for &e in &seq {
                let before = s.state();
                match s.fire(events[e]) {
                    Ok(after) => assert!(allowed.contains(&(before, after))),
                    Err(_) => assert_eq!(s.state(), before),
                }
            }
            assert!(legal(s.history(), allowed));
            checked += 1;
            if seq.len() < depth {
                for e in 0..events.len() {
                    let mut next = seq.clone();
                    next.push(e);
                    stack.push(next);
                }
            }
        }
        assert_eq!(checked, (0..=depth as u32).map(|d| events.len().pow(d)).sum::<usize>());
    }

    #[test]
    fn es_machine_is_closed() {
        use EsState::*;
        exhaust(
            Idle,
            &[EsEvent::Request, EsEvent::SeedReady, EsEvent::Sent],
            &[(Idle, Inferring), (Inferring, Transmitting), (Transmitting, Done)],
            7,
        );
    }

    #[test]
    fn ue_machine_is_closed() {
        use UeState::*;
        exhaust(
            Idle,
            &[UeEvent::Header, UeEvent::Complete, UeEvent::Decoded],
            &[(Idle, Receiving), (Receiving, Decoding), (Decoding, Done)],
            7,
        );
    }

    #[test]
    fn happy_path() {
        let mut es = EsSession::default();
        es.fire(EsEvent::Request).unwrap();
        es.fire(EsEvent::SeedReady).unwrap();
        assert_eq!(es.fire(EsEvent::Sent).unwrap(), EsState::Done);
        assert!(es.fire(EsEvent::Request).is_err());
    }
}
