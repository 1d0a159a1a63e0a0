#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "hypsae/net.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <thread>

#include "hypsae/common.hpp"

namespace hypsae::net {

namespace {

class HttplibTransport final : public Transport {
public:
    HttplibTransport(const std::string& base_url, std::chrono::seconds timeout) {
        const auto scheme_end = base_url.find("://");
        if (scheme_end == std::string::npos) throw ValidationError("base URL needs a scheme: " + base_url);
        const auto path_start = base_url.find('/', scheme_end + 3);
        origin_ = path_start == std::string::npos ? base_url : base_url.substr(0, path_start);
        prefix_ = path_start == std::string::npos ? "" : base_url.substr(path_start);
        while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
        timeout_ = timeout;
    }

    HttpResponse post_json(const std::string& path, const std::string& body,
                           const std::map<std::string, std::string>& headers) override {
        // httplib clients are not thread safe; one per request keeps this simple
        httplib::Client cli(origin_);
        cli.set_read_timeout(timeout_.count(), 0);
        cli.set_connection_timeout(30, 0);
        httplib::Headers h;
        for (const auto& [k, v] : headers) h.emplace(k, v);
        auto res = cli.Post(prefix_ + path, h, body, "application/json");
        if (!res) return {0, httplib::to_string(res.error())};
        return {res->status, res->body};
    }

private:
    std::string origin_;
    std::string prefix_;
    std::chrono::seconds timeout_{120};
};

}  // namespace

std::shared_ptr<Transport> make_http_transport(const std::string& base_url, std::chrono::seconds timeout) {
    return std::make_shared<HttplibTransport>(base_url, timeout);
}

Sleeper real_sleeper() {
    return [](std::chrono::duration<double> d) { std::this_thread::sleep_for(d); };
}

RetryOutcome post_with_retries(Transport& transport, const std::string& path, const std::string& body,
                               const std::map<std::string, std::string>& headers, const RetryPolicy& policy,
                               const Sleeper& sleep) {
    RetryOutcome out;
    const int attempts = std::max(1, policy.max_retries);
    for (int attempt = 0; attempt < attempts; ++attempt) {
        out.response = transport.post_json(path, body, headers);
        out.status_history.push_back(out.response.status);
        if (out.ok() || !is_retryable(out.response.status)) return out;
        if (attempt + 1 < attempts) {
            ++out.backoffs;
            if (sleep) {
                sleep(std::chrono::duration<double>(policy.backoff_base_seconds *
                                                    std::pow(policy.backoff_factor, attempt)));
            }
        }
    }
    return out;
}

std::string api_key_from_env() {
    const char* key = std::getenv("HYPSAE_API_KEY");
    if (key == nullptr || *key == '\0') {
        throw ValidationError("missing API key: set the HYPSAE_API_KEY environment variable");
    }
    return key;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    const auto w = static_cast<std::size_t>(std::max(1, workers));
    if (w == 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mutex;
    std::vector<std::thread> threads;
    const auto count = std::min(w, n);
    threads.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        threads.emplace_back([&] {
            for (;;) {
                const auto i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lk(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                    next.store(n);
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace hypsae::net
