use std::thread;

use super::*;

/// Records what the server saw; cut gradients echo the feature maps.
#[derive(Default)]
struct Recorder {
    rounds: u32,
    quota: u32,
    sizes: Vec<u32>,
    left: u32,
    seen: Vec<Vec<(u32, Vec<f32>)>>,
    front: Vec<Vec<(u32, Vec<f32>)>>,
}

impl Recorder {
    fn new(rounds: u32, quota: u32) -> Self {
        Recorder { rounds, quota, ..Default::default() }
    }
}

impl RoundHandler for Recorder {
    fn begin(&mut self, sizes: &[u32]) -> Result<()> {
        self.sizes = sizes.to_vec();
        self.left = self.rounds;
        Ok(())
    }

    fn next_quotas(&mut self) -> Result<Option<Vec<u32>>> {
        if self.left == 0 {
            return Ok(None);
        }
        self.left -= 1;
        Ok(Some(vec![self.quota; self.sizes.len()]))
    }

    fn on_activations(&mut self, _round: u32, uploads: Vec<Contribution>) -> Result<Vec<Tensor>> {
        self.seen.push(uploads.iter().map(|u| (u.client_id, u.feature_map.data().to_vec())).collect());
        Ok(uploads.into_iter().map(|u| u.feature_map.map(|v| v * 2.0)).collect())
    }

    fn on_front_gradients(&mut self, _round: u32, grads: Vec<(u32, Tensor)>) -> Result<Vec<Tensor>> {
        self.front.push(grads.iter().map(|(id, g)| (*id, g.data().to_vec())).collect());
        let sum: f32 = grads.iter().map(|(_, g)| g.sum()).sum();
        Ok(vec![Tensor::full(&[2], sum)])
    }

    fn after_round(&mut self, round: u32) -> Result<Option<(f64, f64)>> {
        Ok(Some((round as f64 + 0.25, 0.5)))
    }
}

struct Echo {
    id: u32,
    delay_ms: u64,
    synced: Vec<Vec<f32>>,
    metrics: Vec<(u32, f64, f64)>,
}

impl Echo {
    fn new(id: u32, delay_ms: u64) -> Self {
        Echo { id, delay_ms, synced: Vec::new(), metrics: Vec::new() }
    }
}

impl ClientWorker for Echo {
    fn partition_size(&self) -> u32 {
        10 + self.id
    }

    fn forward(&mut self, round: u32, quota: usize) -> Result<(Tensor, Tensor)> {
        thread::sleep(Duration::from_millis(self.delay_ms));
        let v = (self.id * 100 + round) as f32;
        Ok((Tensor::full(&[quota, 2], v), Tensor::zeros(&[quota, 1])))
    }

    fn backward(&mut self, _round: u32, cut: &Tensor, total: usize) -> Result<Tensor> {
        thread::sleep(Duration::from_millis(self.delay_ms));
        Tensor::new(vec![2], vec![cut.sum(), total as f32])
    }

    fn sync(&mut self, _round: u32, params: Vec<Tensor>) -> Result<()> {
        self.synced.push(params[0].data().to_vec());
        Ok(())
    }

    fn metrics(&mut self, round: u32, loss: f64, accuracy: f64) {
        self.metrics.push((round, loss, accuracy));
    }
}

fn fast() -> Timeouts {
    Timeouts {
        handshake: Duration::from_secs(2),
        accept: Duration::from_secs(5),
        round: Duration::from_secs(5),
    }
}

fn spawn_clients(endpoint: &Endpoint, delays: &[u64]) -> Vec<thread::JoinHandle<(Result<ClientReport>, Echo)>> {
    delays
        .iter()
        .enumerate()
        .map(|(id, &delay)| {
            let ep = endpoint.clone();
            thread::spawn(move || {
                let mut w = Echo::new(id as u32, delay);
                let r = connect(&ep, id as u32, &mut w, &fast());
                (r, w)
            })
        })
        .collect()
}

fn run(endpoint: Endpoint, server: Server, delays: &[u64], rounds: u32) -> (Recorder, Vec<(ClientReport, Echo)>) {
    let clients = spawn_clients(&endpoint, delays);
    let mut h = Recorder::new(rounds, 2);
    let report = server.serve(delays.len(), &mut h, &fast()).unwrap();
    assert_eq!(report.rounds, rounds);
    let out = clients
        .into_iter()
        .map(|c| {
            let (r, w) = c.join().unwrap();
            (r.unwrap(), w)
        })
        .collect();
    (h, out)
}

fn loopback_run(delays: &[u64], rounds: u32) -> (Recorder, Vec<(ClientReport, Echo)>) {
    let hub = LoopbackHub::new();
    let ep = Endpoint::Loopback(hub);
    let server = Server::bind(&ep).unwrap();
    run(ep, server, delays, rounds)
}

#[test]
fn single_client_single_round() {
    let (h, clients) = loopback_run(&[0], 1);
    assert_eq!(h.seen.len(), 1);
    assert_eq!(h.seen[0].len(), 1);
    assert_eq!(h.sizes, vec![10]);
    let (report, w) = &clients[0];
    assert_eq!(*report, ClientReport { rounds: 1, participated: 1 });
    // cut grad = 2 * fm = 0 for client 0 round 0; total = 2
    assert_eq!(h.front[0], vec![(0, vec![0.0, 2.0])]);
    assert_eq!(w.synced, vec![vec![2.0, 2.0]]);
    assert_eq!(w.metrics, vec![(0, 0.25, 0.5)]);
}

#[test]
fn arrival_order_does_not_matter() {
    let (ordered, a) = loopback_run(&[0, 0, 0], 3);
    let (permuted, b) = loopback_run(&[60, 120, 0], 3);
    for round in &permuted.seen {
        let ids: Vec<u32> = round.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }
    assert_eq!(ordered.seen, permuted.seen);
    assert_eq!(ordered.front, permuted.front);
    for ((_, x), (_, y)) in a.iter().zip(&b) {
        assert_eq!(x.synced, y.synced);
        assert_eq!(x.metrics, y.metrics);
    }
}

#[test]
fn zero_rounds_shut_down_cleanly() {
    let (h, clients) = loopback_run(&[0, 0], 0);
    assert!(h.seen.is_empty());
    for (r, _) in clients {
        assert_eq!(r, ClientReport::default());
    }
}

#[test]
fn stale_round_is_a_protocol_error() {
    let hub = LoopbackHub::new();
    let ep = Endpoint::Loopback(hub.clone());
    let server = Server::bind(&ep).unwrap();
    let rogue = thread::spawn(move || {
        let mut link = hub.dial().unwrap();
        link.send(&Message::Hello { client_id: 0, partition_size: 4 }).unwrap();
        let Message::RoundStart { round, quotas } = link.recv(Some(Duration::from_secs(5))).unwrap() else {
            panic!("expected RoundStart");
        };
        link.send(&Message::Activations {
            round: round + 5,
            client_id: 0,
            feature_map: Tensor::zeros(&[quotas[0] as usize, 2]),
            labels: Tensor::zeros(&[quotas[0] as usize, 1]),
        })
        .unwrap();
        link.recv(Some(Duration::from_secs(5))).unwrap()
    });
    let err = server.serve(1, &mut Recorder::new(2, 1), &fast()).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    assert_eq!(rogue.join().unwrap(), Message::Bye { reason: bye::PROTOCOL });
}

#[test]
fn duplicate_and_bad_ids_are_turned_away() {
    let hub = LoopbackHub::new();
    let ep = Endpoint::Loopback(hub.clone());
    let server = Server::bind(&ep).unwrap();
    let mut first = hub.dial().unwrap();
    first.send(&Message::Hello { client_id: 0, partition_size: 1 }).unwrap();
    let mut dup = hub.dial().unwrap();
    dup.send(&Message::Hello { client_id: 0, partition_size: 1 }).unwrap();
    let mut bad = hub.dial().unwrap();
    bad.send(&Message::Hello { client_id: 9, partition_size: 1 }).unwrap();
    let second = thread::spawn(move || {
        let mut w = Echo::new(1, 0);
        connect(&ep, 1, &mut w, &fast())
    });
    server.serve(2, &mut Recorder::new(0, 1), &fast()).unwrap();
    let t = Some(Duration::from_secs(5));
    assert_eq!(dup.recv(t).unwrap(), Message::Bye { reason: bye::DUPLICATE_ID });
    assert_eq!(bad.recv(t).unwrap(), Message::Bye { reason: bye::BAD_CLIENT_ID });
    assert_eq!(first.recv(t).unwrap(), Message::Bye { reason: bye::DONE });
    second.join().unwrap().unwrap();
}

#[test]
fn disconnect_mid_round_aborts() {
    let hub = LoopbackHub::new();
    let ep = Endpoint::Loopback(hub.clone());
    let server = Server::bind(&ep).unwrap();
    let quitter = thread::spawn(move || {
        let mut link = hub.dial().unwrap();
        link.send(&Message::Hello { client_id: 0, partition_size: 4 }).unwrap();
        link.recv(Some(Duration::from_secs(5))).unwrap();
        // dropping the link closes the connection
    });
    let err = server.serve(1, &mut Recorder::new(1, 1), &fast()).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    quitter.join().unwrap();
}

#[test]
fn tcp_matches_loopback() {
    let ep = Endpoint::Tcp("127.0.0.1:0".into());
    let server = Server::bind(&ep).unwrap();
    let addr = server.local_addr().unwrap();
    let (tcp, tcp_clients) = run(Endpoint::Tcp(addr.to_string()), server, &[0, 30], 2);
    let (lb, lb_clients) = loopback_run(&[0, 30], 2);
    assert_eq!(tcp.seen, lb.seen);
    assert_eq!(tcp.front, lb.front);
    for ((ra, a), (rb, b)) in tcp_clients.iter().zip(&lb_clients) {
        assert_eq!(ra, rb);
        assert_eq!(a.synced, b.synced);
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn closed_port_is_refused() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let started = Instant::now();
    let err = connect(&Endpoint::Tcp(format!("127.0.0.1:{port}")), 0, &mut Echo::new(0, 0), &fast()).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert!(started.elapsed() < Duration::from_secs(3));
}

#[test]
fn nobody_connects() {
    let ep = Endpoint::Loopback(LoopbackHub::new());
    let server = Server::bind(&ep).unwrap();
    let t = Timeouts { accept: Duration::from_millis(50), ..fast() };
    assert!(matches!(server.serve(1, &mut Recorder::new(1, 1), &t), Err(Error::Transport(_))));
    assert!(Server::bind(&ep).is_err());
}
