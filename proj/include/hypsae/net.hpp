#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <condition_variable>
#include <string>
#include <vector>

namespace hypsae::net {

struct HttpResponse {
    int status = 0;  // 0 means the request never got a response
    std::string body;
};

/// Minimal POST-JSON transport; swapped for a fake in tests.
class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpResponse post_json(const std::string& path, const std::string& body,
                                   const std::map<std::string, std::string>& headers) = 0;
};

/// cpp-httplib backed transport for http:// and https:// base URLs.
std::shared_ptr<Transport> make_http_transport(const std::string& base_url,
                                               std::chrono::seconds timeout = std::chrono::seconds(120));

struct RetryPolicy {
    int max_retries = 5;
    double backoff_base_seconds = 1.0;
    double backoff_factor = 2.0;
};

using Sleeper = std::function<void(std::chrono::duration<double>)>;
Sleeper real_sleeper();

inline bool is_retryable(int status) { return status == 0 || status == 429 || status >= 500; }

/// Result of a retried call, including every status seen on the way.
struct RetryOutcome {
    HttpResponse response;
    std::vector<int> status_history;
    int backoffs = 0;
    bool ok() const { return response.status >= 200 && response.status < 300; }
};

/// Issues the request, retrying retryable statuses up to `max_retries` times
/// total attempts with exponential backoff between them.
RetryOutcome post_with_retries(Transport& transport, const std::string& path, const std::string& body,
                               const std::map<std::string, std::string>& headers, const RetryPolicy& policy,
                               const Sleeper& sleep);

/// Reads HYPSAE_API_KEY or throws naming it.
std::string api_key_from_env();

/// Counting semaphore usable as a process-wide in-flight bound.
class InFlightLimiter {
public:
    explicit InFlightLimiter(int limit) : limit_(limit < 1 ? 1 : limit) {}

    void acquire() {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return in_flight_ < limit_; });
        ++in_flight_;
    }
    void release() {
        {
            std::lock_guard lk(m_);
            --in_flight_;
        }
        cv_.notify_one();
    }
    void set_limit(int limit) {
        {
            std::lock_guard lk(m_);
            limit_ = limit < 1 ? 1 : limit;
        }
        cv_.notify_all();
    }
    int limit() const {
        std::lock_guard lk(m_);
        return limit_;
    }
    int in_flight() const {
        std::lock_guard lk(m_);
        return in_flight_;
    }

    struct Guard {
        InFlightLimiter& l;
        explicit Guard(InFlightLimiter& lim) : l(lim) { l.acquire(); }
        ~Guard() { l.release(); }
        Guard(const Guard&) = delete;
        Guard& operator=(const Guard&) = delete;
    };

private:
    int limit_;
    int in_flight_ = 0;
    mutable std::mutex m_;
    std::condition_variable cv_;
};

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first exception.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace hypsae::net
