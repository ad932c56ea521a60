//! Broadcast channels between computing parties.

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::MpcError;

/// A synchronous all-to-all exchange between the parties of one session.
pub trait Channel {
    fn party_id(&self) -> usize;
    fn n_parties(&self) -> usize;
    /// Sends `mine` to every peer and returns every party's vector, indexed
    /// by party id (this party's own entry included).
    fn exchange(&mut self, mine: &[u128]) -> Result<Vec<Vec<u128>>, MpcError>;
}

/// In-process mesh endpoint backed by unbounded channels.
pub struct LocalChannel {
    id: usize,
    senders: Vec<Option<Sender<Vec<u128>>>>,
    receivers: Vec<Option<Receiver<Vec<u128>>>>,
    rounds: usize,
}

impl LocalChannel {
    /// Builds a fully connected mesh of `n` endpoints.
    pub fn mesh(n: usize) -> Vec<LocalChannel> {
        let mut senders: Vec<Vec<Option<Sender<Vec<u128>>>>> =
            (0..n).map(|_| vec![None; n]).collect();
        let mut receivers: Vec<Vec<Option<Receiver<Vec<u128>>>>> =
            (0..n).map(|_| vec![None; n]).collect();
        for from in 0..n {
            for to in 0..n {
                if from != to {
                    let (s, r) = unbounded();
                    senders[from][to] = Some(s);
                    receivers[to][from] = Some(r);
                }
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(id, (senders, receivers))| LocalChannel {
                id,
                senders,
                receivers,
                rounds: 0,
            })
            .collect()
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }
}

impl Channel for LocalChannel {
    fn party_id(&self) -> usize {
        self.id
    }

    fn n_parties(&self) -> usize {
        self.senders.len()
    }

    fn exchange(&mut self, mine: &[u128]) -> Result<Vec<Vec<u128>>, MpcError> {
        self.rounds += 1;
        for (peer, s) in self.senders.iter().enumerate() {
            if let Some(s) = s {
                s.send(mine.to_vec()).map_err(|_| {
                    MpcError::PeerUnreachable(format!("party {peer} left the session"))
                })?;
            }
        }
        let mut out = Vec::with_capacity(self.receivers.len());
        for (peer, r) in self.receivers.iter().enumerate() {
            match r {
                Some(r) => out.push(r.recv().map_err(|_| {
                    MpcError::PeerUnreachable(format!("party {peer} left the session"))
                })?),
                None => out.push(mine.to_vec()),
            }
        }
        Ok(out)
    }
}

/// Runs one closure per party on its own thread over a fresh local mesh.
///
/// A party that returns early drops its endpoints, so peers blocked on it
/// observe [`MpcError::PeerUnreachable`] instead of hanging.
pub fn run_local<S, T, F>(states: &mut [S], f: F) -> Vec<Result<T, MpcError>>
where
    S: Send,
    T: Send,
    F: Fn(&mut S, &mut LocalChannel) -> Result<T, MpcError> + Sync,
{
    let channels = LocalChannel::mesh(states.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = states
            .iter_mut()
            .zip(channels)
            .map(|(state, mut chan)| {
                let f = &f;
                scope.spawn(move || f(state, &mut chan))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(MpcError::PeerUnreachable("party thread panicked".into()))
                })
            })
            .collect()
    })
}
