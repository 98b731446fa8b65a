use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use super::{complete, BackendError, ChatBackend, ChatRequest, ChatResponse};
use crate::clock::Clock;

/// Exponential backoff with jitter. Retry `k` (0-based) waits a uniformly
/// drawn delay in `[base, base * factor^k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: u32,
    /// Fixed jitter seed; `None` draws from the OS.
    pub jitter_seed: Option<u64>,
}

impl RetryPolicy {
    pub fn new(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::from_millis(500),
            factor: 2,
            jitter_seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.jitter_seed = Some(seed);
        self
    }

    fn delay(&self, retry: u32, rng: &mut StdRng) -> Duration {
        let base = self.base_delay.as_millis() as u64;
        let ceiling = base.saturating_mul((self.factor as u64).saturating_pow(retry));
        Duration::from_millis(rng.random_range(base..=ceiling.max(base)))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self::new(super::DEFAULT_MAX_RETRIES)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub response: ChatResponse,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{source} (after {attempts} attempt(s))")]
pub struct RetryError {
    pub attempts: u32,
    #[source]
    pub source: BackendError,
}

/// Calls the backend, retrying timeouts, transport failures and 5xx
/// responses up to `policy.max_retries` times. Any other error returns
/// immediately.
pub async fn send_with_retry(
    backend: &dyn ChatBackend,
    policy: &RetryPolicy,
    clock: &dyn Clock,
    request: &ChatRequest,
) -> Result<Delivered, RetryError> {
    let mut rng = match policy.jitter_seed {
        Some(seed) => StdRng::seed_from_u64(seed),
        None => StdRng::from_os_rng(),
    };
    let mut attempts = 0;
    loop {
        attempts += 1;
        match complete(backend, request).await {
            Ok(response) => return Ok(Delivered { response, attempts }),
            Err(error) if error.is_retryable() && attempts <= policy.max_retries => {
                let wait = policy.delay(attempts - 1, &mut rng);
                tracing::debug!(
                    backend = backend.name(),
                    attempt = attempts,
                    wait_ms = wait.as_millis() as u64,
                    "retrying after {error}"
                );
                clock.sleep(wait).await;
            }
            Err(source) => return Err(RetryError { attempts, source }),
        }
    }
}
